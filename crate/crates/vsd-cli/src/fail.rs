//! Process-level error categories and their exit codes.
//!
//! Exit code contract: 0 success, 2 configuration error (bad file, unknown
//! key, invalid value, flag misuse), 3 data error (missing or malformed
//! dataset), 4 training divergence, 1 anything else. Scripts dispatch on
//! these, so new failure kinds must map into an existing category.

use std::fmt;

#[derive(Debug)]
pub enum Fail {
    Config(String),
    Data(String),
    Divergence(String),
    Other(String),
}

impl Fail {
    pub fn exit_code(&self) -> i32 {
        match self {
            Fail::Config(_) => 2,
            Fail::Data(_) => 3,
            Fail::Divergence(_) => 4,
            Fail::Other(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Fail::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Fail::Data(msg.into())
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fail::Config(m) => write!(f, "config error: {m}"),
            Fail::Data(m) => write!(f, "data error: {m}"),
            Fail::Divergence(m) => write!(f, "divergence: {m}"),
            Fail::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for Fail {}

impl From<vsd_core::Error> for Fail {
    fn from(e: vsd_core::Error) -> Self {
        match e {
            vsd_core::Error::Diverged { .. } => Fail::Divergence(e.to_string()),
            vsd_core::Error::Config(_) => Fail::Config(e.to_string()),
            other => Fail::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Other(e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail::Other(format!("json: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_contract() {
        assert_eq!(Fail::Config("x".into()).exit_code(), 2);
        assert_eq!(Fail::Data("x".into()).exit_code(), 3);
        assert_eq!(Fail::Divergence("x".into()).exit_code(), 4);
        assert_eq!(Fail::Other("x".into()).exit_code(), 1);
    }

    #[test]
    fn display_prefixes_name_the_failure_class() {
        assert_eq!(Fail::config("bad key").to_string(), "config error: bad key");
        assert_eq!(Fail::data("bad row").to_string(), "data error: bad row");
        assert_eq!(Fail::Divergence("nan".into()).to_string(), "divergence: nan");
        assert_eq!(Fail::Other("io".into()).to_string(), "error: io");
    }

    #[test]
    fn core_errors_map_onto_exit_classes() {
        let diverged = vsd_core::Error::Diverged { epoch: 7, what: "objective is NaN".into() };
        let f: Fail = diverged.into();
        assert_eq!(f.exit_code(), 4);
        assert!(f.to_string().contains("epoch 7"), "{f}");

        let config = vsd_core::Error::config("width must be positive");
        assert_eq!(Fail::from(config).exit_code(), 2);

        let shape = vsd_core::Error::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 5],
        };
        let f: Fail = shape.into();
        assert_eq!(f.exit_code(), 1);
        assert!(f.to_string().contains("matmul"), "{f}");
    }

    #[test]
    fn io_and_json_errors_are_ordinary_failures() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(Fail::from(io).exit_code(), 1);

        let json = serde_json::from_str::<serde_json::Value>("{nope").unwrap_err();
        let f: Fail = json.into();
        assert_eq!(f.exit_code(), 1);
        assert!(f.to_string().starts_with("error: json: "), "{f}");
    }
}
