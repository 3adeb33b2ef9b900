use thiserror::Error;

/// Engine-wide error type. The variants map onto the CLI exit-code contract:
/// config errors exit 2, transport errors exit 3, protocol errors exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    /// Connection setup or byte-stream failure (refused, reset, short read).
    #[error("transport: {0}")]
    Transport(String),

    /// Well-formed bytes arrived but violate the wire protocol or the
    /// engine's event protocol (bad magic, bucket out of range, use after free).
    #[error("protocol: {0}")]
    Protocol(String),

    /// File-format error on partition or result files.
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// The deterministic scheduler proved that every live thread is blocked,
    /// or a free-running simulation exceeded its watchdog.
    #[error("deadlock: {0}")]
    Deadlock(String),

    /// A worker aborted after observing a poisoned queue or pool; the root
    /// cause is recorded at the node that initiated the abort.
    #[error("aborted: {0}")]
    Aborted(String),
}

impl Error {
    /// Exit code for the CLI: 2 config, 3 transport, 4 protocol, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Transport(_) => 3,
            Error::Protocol(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Transport("x".into()).exit_code(), 3);
        assert_eq!(Error::Protocol("x".into()).exit_code(), 4);
        assert_eq!(Error::Format("x".into()).exit_code(), 1);
        assert_eq!(Error::Deadlock("x".into()).exit_code(), 1);
    }
}
