use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

pub type Token = u32;

/// Roles of the reserved tokens that sit above the ordinary alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Special {
    Sep,
    FbOpen,
    FbClose,
    Err,
    Sib,
    Crit,
    Eos,
    Mask,
    High,
    Low,
    Pos(u32),
}

const FIXED: [Special; 10] = [
    Special::Sep,
    Special::FbOpen,
    Special::FbClose,
    Special::Err,
    Special::Sib,
    Special::Crit,
    Special::Eos,
    Special::Mask,
    Special::High,
    Special::Low,
];

impl Special {
    pub(crate) fn code(self) -> (u8, u32) {
        match self {
            Special::Sep => (0, 0),
            Special::FbOpen => (1, 0),
            Special::FbClose => (2, 0),
            Special::Err => (3, 0),
            Special::Sib => (4, 0),
            Special::Crit => (5, 0),
            Special::Eos => (6, 0),
            Special::Mask => (7, 0),
            Special::High => (8, 0),
            Special::Low => (9, 0),
            Special::Pos(p) => (10, p),
        }
    }

    pub(crate) fn from_code(code: u8, arg: u32) -> Result<Self> {
        Ok(match code {
            0 => Special::Sep,
            1 => Special::FbOpen,
            2 => Special::FbClose,
            3 => Special::Err,
            4 => Special::Sib,
            5 => Special::Crit,
            6 => Special::Eos,
            7 => Special::Mask,
            8 => Special::High,
            9 => Special::Low,
            10 => Special::Pos(arg),
            other => return Err(Error::Format(format!("unknown reserved token code {other}"))),
        })
    }
}

/// Token alphabet: `size` ordinary tokens followed by the reserved roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
    reserved: Vec<Special>,
}

impl Vocabulary {
    /// Ordinary tokens `0..size`, the fixed reserved roles, and one position
    /// token per response position.
    pub fn new(size: u32, positions: u32) -> Result<Self> {
        let mut reserved = FIXED.to_vec();
        reserved.extend((0..positions).map(Special::Pos));
        Self::with_reserved(size, reserved)
    }

    pub fn with_reserved(size: u32, reserved: Vec<Special>) -> Result<Self> {
        if size < 2 {
            return config(format!("vocabulary size must be at least 2, got {size}"));
        }
        let mut sorted = reserved.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != reserved.len() {
            return config("reserved token roles must be pairwise distinct");
        }
        for role in [Special::Sep, Special::FbOpen, Special::FbClose] {
            if !reserved.contains(&role) {
                return config(format!("reserved role {role:?} is missing"));
            }
        }
        Ok(Self { size, reserved })
    }

    /// Number of ordinary tokens.
    pub fn size(&self) -> u32 {
        self.size
    }

    /// Ordinary plus reserved tokens.
    pub fn total(&self) -> usize {
        self.size as usize + self.reserved.len()
    }

    pub fn reserved(&self) -> &[Special] {
        &self.reserved
    }

    pub fn special(&self, role: Special) -> Token {
        self.find(role)
            .unwrap_or_else(|| panic!("vocabulary has no reserved token {role:?}"))
    }

    pub fn find(&self, role: Special) -> Option<Token> {
        self.reserved
            .iter()
            .position(|&r| r == role)
            .map(|i| self.size + i as u32)
    }

    pub fn position(&self, pos: usize) -> Option<Token> {
        self.find(Special::Pos(pos as u32))
    }

    pub fn role(&self, token: Token) -> Option<Special> {
        token
            .checked_sub(self.size)
            .and_then(|i| self.reserved.get(i as usize).copied())
    }

    pub fn is_ordinary(&self, token: Token) -> bool {
        token < self.size
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.total()
    }
}

/// Which tokens a policy may emit. Logits of the other tokens are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Emission {
    /// Ordinary tokens only: fixed-length generation.
    #[default]
    Ordinary,
    /// Ordinary tokens plus EOS.
    OrdinaryEos,
    /// Every token in the vocabulary.
    All,
}

impl Emission {
    pub fn allows(self, vocab: &Vocabulary, token: Token) -> bool {
        match self {
            Emission::Ordinary => vocab.is_ordinary(token),
            Emission::OrdinaryEos => {
                vocab.is_ordinary(token) || vocab.find(Special::Eos) == Some(token)
            }
            Emission::All => vocab.contains(token),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Emission::Ordinary => 0,
            Emission::OrdinaryEos => 1,
            Emission::All => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Emission::Ordinary),
            1 => Ok(Emission::OrdinaryEos),
            2 => Ok(Emission::All),
            other => Err(Error::Format(format!("unknown emission code {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_tokens_follow_the_ordinary_alphabet() {
        let v = Vocabulary::new(4, 3).unwrap();
        assert_eq!(v.total(), 4 + 10 + 3);
        assert_eq!(v.special(Special::Sep), 4);
        assert_eq!(v.position(2), Some(4 + 10 + 2));
        assert_eq!(v.position(3), None);
        assert_eq!(v.role(5), Some(Special::FbOpen));
        assert_eq!(v.role(3), None);
        assert!(v.is_ordinary(3) && !v.is_ordinary(4));
    }

    #[test]
    fn rejects_small_or_duplicated_vocabularies() {
        assert!(Vocabulary::new(1, 0).is_err());
        let mut roles = FIXED.to_vec();
        roles.push(Special::Sep);
        assert!(Vocabulary::with_reserved(3, roles).is_err());
        assert!(Vocabulary::with_reserved(3, vec![Special::Sep]).is_err());
        let minimal =
            Vocabulary::with_reserved(3, vec![Special::Sep, Special::FbOpen, Special::FbClose]).unwrap();
        assert_eq!(minimal.total(), 6);
        assert_eq!(minimal.find(Special::Err), None);
    }
}
