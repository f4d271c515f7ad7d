use serde::{Deserialize, Serialize};

use super::vocab::{render_window, tokenize_timestamp, Vocab, EOS, VIS};
use crate::alignment::AffinityMatrix;
use crate::autodiff::Tensor;
use crate::metrics::{Prediction, Window};
use crate::{Error, Result};

/// One grounding example: per-frame visual tokens, frame times, a query and
/// the annotated window.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `[T, N, D_feat]`
    pub frames: Tensor,
    pub times: Vec<f64>,
    pub duration: f64,
    pub query: Vec<usize>,
    pub gt_window: Window,
    pub target_affinity: Option<AffinityMatrix>,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.ndim() != 3 {
            return Err(Error::Dimension(format!(
                "frames must be [T, N, D], got {:?}",
                self.frames.shape()
            )));
        }
        if self.times.len() != self.n_frames() {
            return Err(Error::Value(format!(
                "{} frames but {} timestamps",
                self.n_frames(),
                self.times.len()
            )));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Value("timestamps must be strictly increasing".into()));
        }
        self.gt_window.validate()?;
        if self.gt_window.end > self.duration {
            return Err(Error::Value(format!(
                "window end {} beyond duration {}",
                self.gt_window.end, self.duration
            )));
        }
        if self.query.is_empty() {
            return Err(Error::Value("empty query".into()));
        }
        if let Some(a) = &self.target_affinity {
            if a.n_frames() != self.n_frames() || a.n_tokens() != self.tokens_per_frame() {
                return Err(Error::Dimension("target affinity does not match the frame grid".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Visual,
    Timestamp,
    Query,
    Target,
}

/// Flattened decoder input `[f1, t1, ..., fT, tT, q, (target)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub kinds: Vec<TokenKind>,
    /// Frame id of each position, `None` for text.
    pub frame_index: Vec<Option<usize>>,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions of visual tokens, frame-major then token-major.
    pub fn visual_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.kinds[p] == TokenKind::Visual).collect()
    }

    /// Next-token targets: position `p` predicts `ids[p + 1]` when that
    /// position is a target token.
    pub fn target_labels(&self) -> Vec<Option<usize>> {
        (0..self.len())
            .map(|p| match self.kinds.get(p + 1) {
                Some(TokenKind::Target) => Some(self.ids[p + 1]),
                _ => None,
            })
            .collect()
    }

    pub fn push_target(&mut self, id: usize) {
        self.ids.push(id);
        self.kinds.push(TokenKind::Target);
        self.frame_index.push(None);
    }
}

/// Builds the interleaved sequence; with `with_target` the rendered window
/// text and EOS are appended as target positions.
pub fn build_sequence(sample: &VideoSample, vocab: &Vocab, with_target: bool) -> Result<TokenSequence> {
    if sample.frames.ndim() != 3 || sample.n_frames() == 0 {
        return Err(Error::Value("a sample needs at least one frame".into()));
    }
    if sample.times.len() != sample.n_frames() {
        return Err(Error::Value(format!(
            "{} frames but {} timestamps",
            sample.n_frames(),
            sample.times.len()
        )));
    }
    let (t, n) = (sample.n_frames(), sample.tokens_per_frame());
    let mut seq = TokenSequence {
        ids: Vec::new(),
        kinds: Vec::new(),
        frame_index: Vec::new(),
        n_frames: t,
        tokens_per_frame: n,
    };
    for (f, &time) in sample.times.iter().enumerate() {
        for _ in 0..n {
            seq.ids.push(VIS);
            seq.kinds.push(TokenKind::Visual);
            seq.frame_index.push(Some(f));
        }
        for id in tokenize_timestamp(vocab, time)? {
            seq.ids.push(id);
            seq.kinds.push(TokenKind::Timestamp);
            seq.frame_index.push(None);
        }
    }
    for &q in &sample.query {
        if q >= vocab.size() {
            return Err(Error::Value(format!("query id {q} outside vocabulary")));
        }
        seq.ids.push(q);
        seq.kinds.push(TokenKind::Query);
        seq.frame_index.push(None);
    }
    if with_target {
        let text = render_window(sample.gt_window.start, sample.gt_window.end)?;
        for id in vocab.encode(&text)? {
            seq.push_target(id);
        }
        seq.push_target(EOS);
    }
    Ok(seq)
}

/// Parses `[X s, Y s]`-shaped text (spaces optional). Inverted windows are a
/// failure unless `clamp_inverted` is set, in which case the ends are
/// swapped.
pub fn parse_window(text: &str, clamp_inverted: bool) -> Prediction {
    match parse_inner(text) {
        Ok((a, b)) if a <= b => Prediction::Window(Window { start: a, end: b }),
        Ok((a, b)) if clamp_inverted => Prediction::Window(Window { start: b, end: a }),
        Ok((a, b)) => Prediction::ParseFailure {
            reason: format!("start {a} after end {b}"),
        },
        Err(reason) => Prediction::ParseFailure { reason },
    }
}

struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.s.get(self.pos) == Some(&b' ') {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), String> {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(format!("expected '{}' at byte {}", c as char, self.pos))
        }
    }

    fn digits(&mut self) -> usize {
        let start = self.pos;
        while self.s.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        self.pos - start
    }

    fn number(&mut self) -> std::result::Result<f64, String> {
        self.skip_ws();
        let start = self.pos;
        if self.digits() == 0 {
            return Err(format!("expected a number at byte {start}"));
        }
        if self.s.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            if self.digits() == 0 {
                return Err(format!("missing decimals at byte {}", self.pos));
            }
        }
        let txt = std::str::from_utf8(&self.s[start..self.pos]).map_err(|e| e.to_string())?;
        txt.parse::<f64>().map_err(|e| e.to_string())
    }
}

fn parse_inner(text: &str) -> std::result::Result<(f64, f64), String> {
    let mut c = Cursor {
        s: text.trim().as_bytes(),
        pos: 0,
    };
    c.expect(b'[')?;
    let a = c.number()?;
    c.expect(b's')?;
    c.expect(b',')?;
    let b = c.number()?;
    c.expect(b's')?;
    c.expect(b']')?;
    c.skip_ws();
    if c.pos != c.s.len() {
        return Err(format!("trailing text at byte {}", c.pos));
    }
    Ok((a, b))
}
