//! Pluggable generators, reply sources and the optional ambiguity hook.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use super::DialogError;
use crate::decoder::{DecoderError, TokenSequence, ToyDecoder};

/// Anything that continues a prefix with text.
pub trait GeneratorPort {
    fn generate(&mut self, prefix: &str) -> Result<String, DialogError>;
}

impl<F: FnMut(&str) -> String> GeneratorPort for F {
    fn generate(&mut self, prefix: &str) -> Result<String, DialogError> {
        Ok(self(prefix))
    }
}

/// Answers clarification questions.
pub trait ReplySource {
    fn reply(&mut self, question: &str) -> Result<String, DialogError>;
}

/// Scores a prefix for ambiguity before a generation step. `None` means the
/// hook has nothing to say for this prefix.
pub trait AmbiguityHook {
    fn ambiguity(&mut self, prefix: &str) -> Option<f64>;
}

impl<F: FnMut(&str) -> Option<f64>> AmbiguityHook for F {
    fn ambiguity(&mut self, prefix: &str) -> Option<f64> {
        self(prefix)
    }
}

/// Replays fixed outputs in order, ignoring the prefix.
#[derive(Debug, Clone)]
pub struct ScriptedGenerator {
    outputs: VecDeque<String>,
}

impl ScriptedGenerator {
    pub fn new<S: Into<String>>(outputs: impl IntoIterator<Item = S>) -> Self {
        Self {
            outputs: outputs.into_iter().map(Into::into).collect(),
        }
    }
}

impl GeneratorPort for ScriptedGenerator {
    fn generate(&mut self, _prefix: &str) -> Result<String, DialogError> {
        self.outputs
            .pop_front()
            .ok_or_else(|| DialogError::Generator("script exhausted".into()))
    }
}

/// Replays recorded answers; optionally repeats one answer forever.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    replies: VecDeque<String>,
    fallback: Option<String>,
}

impl ScriptedOracle {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: replies.into_iter().map(Into::into).collect(),
            fallback: None,
        }
    }

    pub fn repeating(reply: impl Into<String>) -> Self {
        Self {
            replies: VecDeque::new(),
            fallback: Some(reply.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.replies.len()
    }
}

impl ReplySource for ScriptedOracle {
    fn reply(&mut self, _question: &str) -> Result<String, DialogError> {
        self.replies
            .pop_front()
            .or_else(|| self.fallback.clone())
            .ok_or(DialogError::OracleExhausted)
    }
}

/// Human in the loop: shows each question on `prompt` and reads one answer
/// line from `input`. End of input exhausts the oracle.
pub struct LineOracle<R, W> {
    input: R,
    prompt: W,
}

impl<R: BufRead, W: Write> LineOracle<R, W> {
    pub fn new(input: R, prompt: W) -> Self {
        Self { input, prompt }
    }
}

impl<R: BufRead, W: Write> ReplySource for LineOracle<R, W> {
    fn reply(&mut self, question: &str) -> Result<String, DialogError> {
        let io_err = |e: std::io::Error| DialogError::Generator(format!("terminal i/o: {e}"));
        writeln!(self.prompt, "{} {question}", super::ASSISTANT_TAG).map_err(io_err)?;
        write!(self.prompt, "{} ", super::USER_TAG).map_err(io_err)?;
        self.prompt.flush().map_err(io_err)?;
        let mut line = String::new();
        if self.input.read_line(&mut line).map_err(io_err)? == 0 {
            return Err(DialogError::OracleExhausted);
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    }
}

/// Greedy decoding with the toy decoder.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    decoder: ToyDecoder,
    max_new_tokens: usize,
}

impl ToyGenerator {
    pub fn new(decoder: ToyDecoder, max_new_tokens: usize) -> Self {
        Self {
            decoder,
            max_new_tokens,
        }
    }
}

impl GeneratorPort for ToyGenerator {
    fn generate(&mut self, prefix: &str) -> Result<String, DialogError> {
        let tok = self.decoder.tokenizer();
        let seq = TokenSequence::from_text(tok, self.decoder.config().num_image_tokens, prefix, "");
        let ids = self
            .decoder
            .greedy_generate(&seq, self.max_new_tokens)
            .map_err(|e: DecoderError| DialogError::Generator(e.to_string()))?;
        Ok(tok.decode(&ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;

    #[test]
    fn line_oracle_reads_lines_until_eof() {
        let input = b"the red one\r\nleft\n".as_slice();
        let mut shown = Vec::new();
        {
            let mut o = LineOracle::new(input, &mut shown);
            assert_eq!(o.reply("Which?").unwrap(), "the red one");
            assert_eq!(o.reply("Sure?").unwrap(), "left");
            assert_eq!(o.reply("Again?"), Err(DialogError::OracleExhausted));
        }
        assert!(String::from_utf8(shown)
            .unwrap()
            .starts_with("assistant: Which?\nuser: "));
    }

    #[test]
    fn toy_generator_is_deterministic() {
        let dec = ToyDecoder::new(DecoderConfig::default().with_grid(2)).unwrap();
        let mut a = ToyGenerator::new(dec.clone(), 6);
        let mut b = ToyGenerator::new(dec, 6);
        let p = "<image>clarify Get the cup";
        assert_eq!(a.generate(p).unwrap(), b.generate(p).unwrap());
    }
}
