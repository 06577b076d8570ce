use crate::error::{Error, Result};

use super::vocab::{Special, Token, Vocabulary};

/// Conditioning for one next-token evaluation.
///
/// Without feedback this is the student's view of the prompt; with feedback
/// it is the teacher's. Both are evaluated by the same parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Context<'a> {
    pub feedback: Option<&'a [Token]>,
    pub prompt: &'a [Token],
    pub prefix: &'a [Token],
}

impl<'a> Context<'a> {
    pub fn student(prompt: &'a [Token]) -> Self {
        Self {
            feedback: None,
            prompt,
            prefix: &[],
        }
    }

    pub fn teacher(feedback: &'a [Token], prompt: &'a [Token]) -> Self {
        Self {
            feedback: Some(feedback),
            prompt,
            prefix: &[],
        }
    }

    pub fn with_prefix(self, prefix: &'a [Token]) -> Self {
        Self { prefix, ..self }
    }

    /// `FB_OPEN feedback FB_CLOSE` (when present), prompt, `SEP`, prefix.
    pub fn serialize(&self, vocab: &Vocabulary) -> Vec<Token> {
        let fb_len = self.feedback.map_or(0, |f| f.len() + 2);
        let mut key = Vec::with_capacity(fb_len + self.prompt.len() + 1 + self.prefix.len());
        if let Some(fb) = self.feedback {
            key.push(vocab.special(Special::FbOpen));
            key.extend_from_slice(fb);
            key.push(vocab.special(Special::FbClose));
        }
        key.extend_from_slice(self.prompt);
        key.push(vocab.special(Special::Sep));
        key.extend_from_slice(self.prefix);
        key
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Precondition("prompt must be nonempty".into()));
        }
        let all = self
            .feedback
            .into_iter()
            .flatten()
            .chain(self.prompt)
            .chain(self.prefix);
        for &t in all {
            if !vocab.contains(t) {
                return Err(Error::Precondition(format!(
                    "token {t} outside a vocabulary of {}",
                    vocab.total()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_order() {
        let v = Vocabulary::new(3, 1).unwrap();
        let sep = v.special(Special::Sep);
        let open = v.special(Special::FbOpen);
        let close = v.special(Special::FbClose);
        let fb = [v.special(Special::Err), 1];
        let ctx = Context::teacher(&fb, &[2, 0]).with_prefix(&[1]);
        assert_eq!(ctx.serialize(&v), vec![open, fb[0], 1, close, 2, 0, sep, 1]);
        assert_eq!(Context::student(&[2]).serialize(&v), vec![2, sep]);
    }

    #[test]
    fn empty_prompt_is_invalid() {
        let v = Vocabulary::new(3, 1).unwrap();
        assert!(Context::student(&[]).validate(&v).is_err());
        assert!(Context::student(&[99]).validate(&v).is_err());
    }
}
