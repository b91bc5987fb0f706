//! Line protocol spoken by `tierkv serve`.
//!
//! Requests: `SET <key> <base64>`, `GET <key>`, `DEL <key>`, `STATS`, `QUIT`.
//! Responses: `+OK`, `$<base64>`, `$-` (absent), `:<integer>`,
//! `-ERR <message>`; `STATS` answers `name value` lines closed by `.`.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use thiserror::Error;

pub const MAX_KEY_LEN: usize = 512;
pub const MAX_VALUE_LEN: usize = 16 << 20;
/// Longest accepted request line: a maximal base64 value plus framing.
pub const MAX_LINE_LEN: usize = MAX_VALUE_LEN / 3 * 4 + 8 + MAX_KEY_LEN + 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireRequest {
    Set(Vec<u8>, Vec<u8>),
    Get(Vec<u8>),
    Del(Vec<u8>),
    Stats,
    Quit,
}

pub fn valid_key(key: &[u8]) -> bool {
    (1..=MAX_KEY_LEN).contains(&key.len()) && key.iter().all(|b| b.is_ascii_graphic())
}

fn key_arg(arg: &[u8]) -> Result<Vec<u8>, String> {
    if valid_key(arg) {
        Ok(arg.to_vec())
    } else {
        Err("invalid key".into())
    }
}

/// Parses one request line (without its LF).
pub fn parse_request(line: &[u8]) -> Result<WireRequest, String> {
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let parts: Vec<&[u8]> = line.split(|&b| b == b' ').collect();
    let cmd = parts[0].to_ascii_uppercase();
    let arity = |n: usize| {
        if parts.len() == n {
            Ok(())
        } else {
            Err(format!("wrong number of arguments for {}", String::from_utf8_lossy(&cmd)))
        }
    };
    match cmd.as_slice() {
        b"SET" => {
            arity(3)?;
            let value = B64.decode(parts[2]).map_err(|_| "value is not base64".to_string())?;
            if value.len() > MAX_VALUE_LEN {
                return Err("value too large".into());
            }
            Ok(WireRequest::Set(key_arg(parts[1])?, value))
        }
        b"GET" => {
            arity(2)?;
            Ok(WireRequest::Get(key_arg(parts[1])?))
        }
        b"DEL" => {
            arity(2)?;
            Ok(WireRequest::Del(key_arg(parts[1])?))
        }
        b"STATS" => arity(1).map(|_| WireRequest::Stats),
        b"QUIT" => arity(1).map(|_| WireRequest::Quit),
        b"" => Err("empty command".into()),
        _ => Err(format!("unknown command {}", String::from_utf8_lossy(&cmd))),
    }
}

/// Reads one LF-terminated line of at most `limit` bytes. `Ok(None)` on a
/// clean EOF; an over-long line or a truncated final line is an error.
pub fn read_line<R: BufRead>(r: &mut R, limit: usize) -> io::Result<Option<Vec<u8>>> {
    let mut buf = Vec::new();
    let n = r.take(limit as u64 + 1).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        let kind = if buf.len() > limit {
            io::ErrorKind::InvalidData
        } else {
            io::ErrorKind::UnexpectedEof
        };
        return Err(io::Error::new(kind, "incomplete or over-long line"));
    }
    buf.pop();
    Ok(Some(buf))
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("server error: {0}")]
    Server(String),
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

/// Blocking client for the line protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    /// Sends a raw request line.
    pub fn send(&mut self, line: &str) -> Result<(), ClientError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn reply(&mut self) -> Result<String, ClientError> {
        match read_line(&mut self.reader, MAX_LINE_LEN)? {
            Some(l) => String::from_utf8(l).map_err(|_| ClientError::Protocol("non-ASCII reply".into())),
            None => Err(ClientError::Io(io::ErrorKind::UnexpectedEof.into())),
        }
    }

    pub fn request(&mut self, line: &str) -> Result<String, ClientError> {
        self.send(line)?;
        self.reply()
    }

    fn checked(reply: String) -> Result<String, ClientError> {
        match reply.strip_prefix("-ERR ") {
            Some(msg) => Err(ClientError::Server(msg.to_string())),
            None => Ok(reply),
        }
    }

    pub fn set(&mut self, key: &str, value: &[u8]) -> Result<(), ClientError> {
        let r = Self::checked(self.request(&format!("SET {key} {}", B64.encode(value)))?)?;
        if r == "+OK" {
            Ok(())
        } else {
            Err(ClientError::Protocol(r))
        }
    }

    pub fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>, ClientError> {
        let r = Self::checked(self.request(&format!("GET {key}"))?)?;
        match r.strip_prefix('$') {
            Some("-") => Ok(None),
            Some(b) => B64
                .decode(b)
                .map(Some)
                .map_err(|_| ClientError::Protocol(r.clone())),
            None => Err(ClientError::Protocol(r)),
        }
    }

    pub fn del(&mut self, key: &str) -> Result<i64, ClientError> {
        let r = Self::checked(self.request(&format!("DEL {key}"))?)?;
        r.strip_prefix(':')
            .and_then(|n| n.parse().ok())
            .ok_or(ClientError::Protocol(r))
    }

    pub fn stats(&mut self) -> Result<BTreeMap<String, String>, ClientError> {
        self.send("STATS")?;
        let mut out = BTreeMap::new();
        loop {
            let line = Self::checked(self.reply()?)?;
            if line == "." {
                return Ok(out);
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| ClientError::Protocol(line.clone()))?;
            out.insert(k.to_string(), v.to_string());
        }
    }

    pub fn quit(mut self) -> Result<(), ClientError> {
        self.request("QUIT").map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_requests() {
        assert_eq!(
            parse_request(b"SET k aGk="),
            Ok(WireRequest::Set(b"k".to_vec(), b"hi".to_vec()))
        );
        assert_eq!(parse_request(b"get k\r"), Ok(WireRequest::Get(b"k".to_vec())));
        assert_eq!(parse_request(b"DEL k"), Ok(WireRequest::Del(b"k".to_vec())));
        assert_eq!(parse_request(b"STATS"), Ok(WireRequest::Stats));
        assert_eq!(parse_request(b"QUIT"), Ok(WireRequest::Quit));
        assert!(parse_request(b"SET k").is_err());
        assert!(parse_request(b"SET k !!").is_err());
        assert!(parse_request(b"GET").is_err());
        assert!(parse_request(b"FOO x").is_err());
        assert!(parse_request(b"").is_err());
        assert!(parse_request(b"GET a\x01").is_err());
        let long = vec![b'k'; MAX_KEY_LEN + 1];
        assert!(parse_request(&[b"GET ".as_slice(), &long].concat()).is_err());
    }

    #[test]
    fn line_limits() {
        let mut r = &b"abc\nde"[..];
        assert_eq!(read_line(&mut r, 10).unwrap(), Some(b"abc".to_vec()));
        assert!(read_line(&mut r, 10).is_err());
        let mut r = &b"abcdef\n"[..];
        assert_eq!(read_line(&mut r, 3).unwrap_err().kind(), io::ErrorKind::InvalidData);
        let mut r = &b""[..];
        assert_eq!(read_line(&mut r, 3).unwrap(), None);
    }
}
