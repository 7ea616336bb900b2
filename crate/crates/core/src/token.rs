//! Token ids, function-name tokens and the versioned vocabulary manifest.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_HEADER: &str = "# agile vocabulary v1";

/// Ids below this value are reserved; environment content starts here.
pub const CONTENT_BASE: u32 = 32;

/// The nine executor functions an agent can call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FunctionName {
    GetQuestion,
    RetrieveMemory,
    SeekAdvice,
    Reflection,
    UpdateMemory,
    SearchProduct,
    PredictAnswer,
    SubmitAnswer,
    ClearContext,
}

impl FunctionName {
    pub const ALL: [FunctionName; 9] = [
        FunctionName::GetQuestion,
        FunctionName::RetrieveMemory,
        FunctionName::SeekAdvice,
        FunctionName::Reflection,
        FunctionName::UpdateMemory,
        FunctionName::SearchProduct,
        FunctionName::PredictAnswer,
        FunctionName::SubmitAnswer,
        FunctionName::ClearContext,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> Token {
        Token(1 + self as u32)
    }

    pub fn from_token(token: Token) -> Option<Self> {
        match token.0 {
            1..=9 => Some(Self::ALL[(token.0 - 1) as usize]),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FunctionName::GetQuestion => "[GetQuestion]",
            FunctionName::RetrieveMemory => "[RetrieveMemory]",
            FunctionName::SeekAdvice => "[SeekAdvice]",
            FunctionName::Reflection => "[Reflection]",
            FunctionName::UpdateMemory => "[UpdateMemory]",
            FunctionName::SearchProduct => "[SearchProduct]",
            FunctionName::PredictAnswer => "[PredictAnswer]",
            FunctionName::SubmitAnswer => "[SubmitAnswer]",
            FunctionName::ClearContext => "[ClearContext]",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for FunctionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Bos,
    Function(FunctionName),
    Content,
}

/// A token id. The kind is fixed by the id range: 0 is BOS, 1..=9 are the
/// function names, everything else is content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub const BOS: Token = Token(0);
    /// Sentinel for "no information" (absent retrieval, empty reflection).
    pub const NO_INFO: Token = Token(10);
    pub const SEARCH_ERROR: Token = Token(11);
    pub const SEP: Token = Token(12);
    /// Negative answer for reasoning questions whose premise does not hold.
    pub const NO: Token = Token(13);
    pub const SEARCH: Token = Token(14);
    pub const OP_EQ: Token = Token(15);
    pub const OP_GE: Token = Token(16);
    pub const OP_LE: Token = Token(17);

    pub fn id(self) -> u32 {
        self.0
    }

    pub fn kind(self) -> TokenKind {
        if self.0 == 0 {
            TokenKind::Bos
        } else if let Some(f) = FunctionName::from_token(self) {
            TokenKind::Function(f)
        } else {
            TokenKind::Content
        }
    }

    pub fn function(self) -> Option<FunctionName> {
        FunctionName::from_token(self)
    }

    pub fn is_content(self) -> bool {
        matches!(self.kind(), TokenKind::Content)
    }
}

impl From<FunctionName> for Token {
    fn from(f: FunctionName) -> Self {
        f.token()
    }
}

const RESERVED: [(Token, &str); 8] = [
    (Token::NO_INFO, "no information"),
    (Token::SEARCH_ERROR, "search error"),
    (Token::SEP, "[SEP]"),
    (Token::NO, "no"),
    (Token::SEARCH, "search"),
    (Token::OP_EQ, "="),
    (Token::OP_GE, ">="),
    (Token::OP_LE, "<="),
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("malformed vocabulary manifest at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate token id {0}")]
    DuplicateId(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub id: u32,
    pub kind: TokenKind,
    pub name: String,
}

/// Maps every token id to its kind and a display name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
}

impl Vocabulary {
    /// Builds a vocabulary with the reserved block followed by `content`
    /// names, assigned ids from [`CONTENT_BASE`] upwards.
    pub fn new<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries = Vec::new();
        entries.push(VocabEntry {
            id: 0,
            kind: TokenKind::Bos,
            name: "[BOS]".into(),
        });
        for f in FunctionName::ALL {
            entries.push(VocabEntry {
                id: f.token().0,
                kind: TokenKind::Function(f),
                name: f.name().into(),
            });
        }
        for (token, name) in RESERVED {
            entries.push(VocabEntry {
                id: token.0,
                kind: TokenKind::Content,
                name: name.into(),
            });
        }
        for id in (RESERVED.len() as u32 + 10)..CONTENT_BASE {
            entries.push(VocabEntry {
                id,
                kind: TokenKind::Content,
                name: format!("<unused{id}>"),
            });
        }
        for (i, name) in content.into_iter().enumerate() {
            entries.push(VocabEntry {
                id: CONTENT_BASE + i as u32,
                kind: TokenKind::Content,
                name: name.into(),
            });
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: Token) -> bool {
        (token.0 as usize) < self.entries.len()
    }

    pub fn entry(&self, token: Token) -> Option<&VocabEntry> {
        self.entries.get(token.0 as usize)
    }

    pub fn name(&self, token: Token) -> Option<&str> {
        self.entry(token).map(|e| e.name.as_str())
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn write_manifest<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        for e in &self.entries {
            let kind = match e.kind {
                TokenKind::Bos => "bos",
                TokenKind::Function(_) => "function",
                TokenKind::Content => "content",
            };
            writeln!(w, "{}\t{}\t{}", e.id, kind, e.name)?;
        }
        Ok(())
    }

    pub fn manifest_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_manifest(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("manifest is utf-8")
    }

    /// SHA-256 of the manifest text, hex encoded. Trajectory files carry it
    /// so a replay can refuse a mismatched vocabulary.
    pub fn manifest_hash(&self) -> String {
        let digest = Sha256::digest(self.manifest_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn read_manifest<R: BufRead>(r: R) -> Result<Self, VocabError> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim_end() == MANIFEST_HEADER => {}
            Some(Err(e)) => return Err(e.into()),
            _ => {
                return Err(VocabError::Malformed {
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        }
        let mut entries: Vec<VocabEntry> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let lineno = n + 2;
            let bad = |reason: &str| VocabError::Malformed {
                line: lineno,
                reason: reason.into(),
            };
            let mut parts = line.splitn(3, '\t');
            let id: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad id"))?;
            let kind = parts.next().ok_or_else(|| bad("missing kind"))?;
            let name = parts.next().ok_or_else(|| bad("missing name"))?.to_string();
            if id as usize != entries.len() {
                return Err(if (id as usize) < entries.len() {
                    VocabError::DuplicateId(id)
                } else {
                    bad("ids must be dense and ascending")
                });
            }
            let kind = match kind {
                "bos" if id == 0 => TokenKind::Bos,
                "function" => TokenKind::Function(
                    FunctionName::from_token(Token(id))
                        .filter(|f| f.name() == name)
                        .ok_or_else(|| bad("function id/name mismatch"))?,
                ),
                "content" if Token(id).is_content() => TokenKind::Content,
                _ => return Err(bad("kind does not match id range")),
            };
            entries.push(VocabEntry { id, kind, name });
        }
        if entries.len() < CONTENT_BASE as usize {
            return Err(VocabError::Malformed {
                line: entries.len() + 1,
                reason: "reserved block incomplete".into(),
            });
        }
        Ok(Self { entries })
    }
}
