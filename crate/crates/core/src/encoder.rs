//! Word-level vocabulary and the frozen post-LN transformer encoder with
//! layerwise prompt injection.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use gsap_autograd::{gelu, Group, Mat, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GsapError, Result};
use crate::nn::{Affine, Linear};
use crate::text::tokenize;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()))
    }
}

impl Vocab {
    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in tokens {
            v.push(t);
        }
        v
    }

    fn push(&mut self, t: String) {
        if !self.index.contains_key(&t) {
            self.index.insert(t.clone(), self.tokens.len());
            self.tokens.push(t);
        }
    }

    /// Specials first, then words in order of first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::default();
        for text in texts {
            for t in tokenize(text) {
                v.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n").map_err(|e| GsapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GsapError::io(path, e))?;
        let v = Self::from_tokens(text.lines().map(str::to_string));
        for (i, s) in SPECIALS.iter().enumerate() {
            if v.tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(GsapError::Parse { path: path.into(), line: i + 1, message: format!("expected {s}") });
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: 128, layers: 4, heads: 4, ffn: 512, max_len: 256, ln_eps: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: Affine,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: Affine,
}

#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub cfg: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln: Affine,
    pub layers: Vec<EncoderLayer>,
}

/// Prompt rows for the first `layers.len()` layers, each `k × hidden`.
#[derive(Clone, Debug, Default)]
pub struct Injection {
    pub layers: Vec<Var>,
}

impl Injection {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// `(k + tokens) × hidden` final states.
    pub last: Var,
    /// Output of every layer, before the next layer's prompts are written.
    pub layer_outputs: Vec<Var>,
    /// Number of leading prompt positions.
    pub prompt_len: usize,
}

impl FrozenEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, vocab_size: usize, rng: &mut R) -> Self {
        assert!(cfg.hidden % cfg.heads == 0, "hidden size must divide into heads");
        let h = cfg.hidden;
        let g = Group::Frozen;
        let tok_emb = store.add("encoder.tok_emb", Mat::randn(vocab_size, h, 1.0, rng), g);
        let pos_emb = store.add("encoder.pos_emb", Mat::randn(cfg.max_len, h, 0.1, rng), g);
        let emb_ln = Affine::new(store, "encoder.emb_ln", h, g);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayer {
                    q: Linear::new(store, &format!("{p}.q"), h, h, true, g, rng),
                    k: Linear::new(store, &format!("{p}.k"), h, h, true, g, rng),
                    v: Linear::new(store, &format!("{p}.v"), h, h, true, g, rng),
                    o: Linear::new(store, &format!("{p}.o"), h, h, true, g, rng),
                    ln1: Affine::new(store, &format!("{p}.ln1"), h, g),
                    ff1: Linear::new(store, &format!("{p}.ff1"), h, cfg.ffn, true, g, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), cfg.ffn, h, true, g, rng),
                    ln2: Affine::new(store, &format!("{p}.ln2"), h, g),
                }
            })
            .collect();
        Self { cfg, tok_emb, pos_emb, emb_ln, layers }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        v.extend(self.emb_ln.params());
        for l in &self.layers {
            for lin in [&l.q, &l.k, &l.v, &l.o, &l.ff1, &l.ff2] {
                v.extend(lin.params());
            }
            v.extend(l.ln1.params());
            v.extend(l.ln2.params());
        }
        v
    }

    fn check_len(&self, tokens: usize, k: usize) -> Result<()> {
        if tokens + k > self.cfg.max_len {
            return Err(GsapError::SequenceOverflow { len: tokens + k, max: self.cfg.max_len });
        }
        Ok(())
    }

    /// Reference forward without prompts and without a tape.
    pub fn forward_plain(&self, store: &ParamStore, tokens: &[usize]) -> Result<Mat> {
        self.check_len(tokens.len(), 0)?;
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let x = store.get(self.tok_emb).gather_rows(tokens).add(&store.get(self.pos_emb).gather_rows(&pos));
        let mut x = self.emb_ln.eval(store, &x.layer_norm_rows(self.cfg.ln_eps));
        for l in &self.layers {
            x = self.layer_plain(store, l, &x);
        }
        Ok(x)
    }

    fn layer_plain(&self, store: &ParamStore, l: &EncoderLayer, x: &Mat) -> Mat {
        let (h, nh) = (self.cfg.hidden, self.cfg.heads);
        let dh = h / nh;
        let q = l.q.eval(store, x);
        let k = l.k.eval(store, x);
        let v = l.v.eval(store, x);
        let heads: Vec<Mat> = (0..nh)
            .map(|i| {
                let s = q.slice_cols(i * dh, dh).matmul_t(&k.slice_cols(i * dh, dh)).scale(1.0 / (dh as f64).sqrt());
                s.softmax_rows().matmul(&v.slice_cols(i * dh, dh))
            })
            .collect();
        let refs: Vec<&Mat> = heads.iter().collect();
        let a = l.o.eval(store, &Mat::concat_cols(&refs));
        let x1 = l.ln1.eval(store, &x.add(&a).layer_norm_rows(self.cfg.ln_eps));
        let f = l.ff2.eval(store, &l.ff1.eval(store, &x1).map(gelu));
        l.ln2.eval(store, &x1.add(&f).layer_norm_rows(self.cfg.ln_eps))
    }

    fn layer_tape(&self, tape: &mut Tape, store: &ParamStore, l: &EncoderLayer, x: Var) -> Var {
        let (h, nh) = (self.cfg.hidden, self.cfg.heads);
        let dh = h / nh;
        let q = l.q.forward(tape, store, x);
        let k = l.k.forward(tape, store, x);
        let v = l.v.forward(tape, store, x);
        let heads: Vec<Var> = (0..nh)
            .map(|i| {
                let qi = tape.slice_cols(q, i * dh, dh);
                let ki = tape.slice_cols(k, i * dh, dh);
                let vi = tape.slice_cols(v, i * dh, dh);
                let s = tape.matmul_t(qi, ki);
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
                let a = tape.softmax_rows(s);
                tape.matmul(a, vi)
            })
            .collect();
        let cat = tape.concat_cols(&heads);
        let a = l.o.forward(tape, store, cat);
        let r = tape.add(x, a);
        let n = tape.layer_norm(r, self.cfg.ln_eps);
        let x1 = l.ln1.forward(tape, store, n);
        let f = l.ff1.forward(tape, store, x1);
        let f = tape.gelu(f);
        let f = l.ff2.forward(tape, store, f);
        let r = tape.add(x1, f);
        let n = tape.layer_norm(r, self.cfg.ln_eps);
        l.ln2.forward(tape, store, n)
    }

    /// Text embeddings (token + position, normalized) on the tape.
    pub fn embed_tokens(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Var {
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let t = tape.embed(store, self.tok_emb, tokens);
        let p = tape.embed(store, self.pos_emb, &pos);
        let x = tape.add(t, p);
        let x = tape.layer_norm(x, self.cfg.ln_eps);
        self.emb_ln.forward(tape, store, x)
    }

    /// Encodes `tokens` with prompts prepended at layer 1 and written over
    /// the first `k` positions before each later prompting layer.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize], inj: &Injection) -> Result<EncoderOutput> {
        if inj.depth() > self.layers.len() {
            return Err(GsapError::Config(format!(
                "{} prompting layers requested for a {}-layer encoder",
                inj.depth(),
                self.layers.len()
            )));
        }
        let k = inj.layers.first().map_or(0, |&p| tape.shape(p).0);
        for &p in &inj.layers {
            let (r, c) = tape.shape(p);
            if r != k || c != self.cfg.hidden {
                return Err(GsapError::DimMismatch { what: "prompt rows", expected: k, found: r });
            }
        }
        self.check_len(tokens.len(), k)?;
        let text = self.embed_tokens(tape, store, tokens);
        let n = k + tokens.len();
        let mut x = text;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (j, l) in self.layers.iter().enumerate() {
            if let Some(&p) = inj.layers.get(j) {
                let rest = if j == 0 { x } else { tape.slice_rows(x, k, n - k) };
                x = tape.concat_rows(&[p, rest]);
            }
            x = self.layer_tape(tape, store, l, x);
            layer_outputs.push(x);
        }
        Ok(EncoderOutput { last: x, layer_outputs, prompt_len: k })
    }

    /// Mean of the plain final states over the phrase tokens of
    /// `[CLS] phrase [SEP]`; zero for a phrase with no tokens.
    pub fn phrase_embedding(&self, store: &ParamStore, vocab: &Vocab, phrase: &str) -> Result<Mat> {
        let words = vocab.encode(phrase);
        if words.is_empty() {
            return Ok(Mat::zeros(1, self.cfg.hidden));
        }
        let words = &words[..words.len().min(self.cfg.max_len - 2)];
        let mut toks = vec![CLS];
        toks.extend_from_slice(words);
        toks.push(SEP);
        let out = self.forward_plain(store, &toks)?;
        Ok(out.slice_rows(1, words.len()).mean_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, FrozenEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { hidden: 8, layers: 2, heads: 2, ffn: 16, max_len: 12, ln_eps: 1e-5 };
        let enc = FrozenEncoder::new(&mut store, cfg, 10, &mut rng);
        (store, enc)
    }

    #[test]
    fn vocab_specials_and_unknowns() {
        let v = Vocab::build(["The cat", "the dog"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.encode("the bird"), vec![4, UNK]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["alpha beta"]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn no_prompts_is_bit_identical_to_plain() {
        let (store, enc) = tiny();
        let toks = [CLS, 4, 5, 9, SEP];
        let plain = enc.forward_plain(&store, &toks).unwrap();
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &toks, &Injection::none()).unwrap();
        let a: Vec<u64> = tape.value(out.last).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = plain.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn prompts_change_text_states_and_extend_length() {
        let (store, enc) = tiny();
        let toks = [CLS, 4, SEP];
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p1 = tape.input(Mat::randn(3, 8, 1.0, &mut rng));
        let p2 = tape.input(Mat::randn(3, 8, 1.0, &mut rng));
        let out = enc.encode(&mut tape, &store, &toks, &Injection { layers: vec![p1, p2] }).unwrap();
        assert_eq!(tape.shape(out.last), (6, 8));
        let plain = enc.forward_plain(&store, &toks).unwrap();
        assert!(tape.value(out.last).slice_rows(3, 3).max_abs_diff(&plain) > 1e-6);
    }

    #[test]
    fn overflow_is_reported() {
        let (store, enc) = tiny();
        let toks = vec![4; 10];
        let mut tape = Tape::new();
        let p = tape.input(Mat::zeros(3, 8));
        let err = enc.encode(&mut tape, &store, &toks, &Injection { layers: vec![p] }).unwrap_err();
        assert!(matches!(err, GsapError::SequenceOverflow { len: 13, max: 12 }));
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let (store, enc) = tiny();
        let mut tape = Tape::new();
        let p = tape.input(Mat::randn(2, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let out = enc.encode(&mut tape, &store, &[CLS, 5, SEP], &Injection { layers: vec![p] }).unwrap();
        // plain sums of layer-normalized rows are constant, so weight them
        let w = tape.constant(Mat::randn(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let y = tape.mul(out.last, w);
        let loss = tape.sum_all(y);
        let g = tape.backward(loss);
        assert!(g.params().is_empty());
        assert!(g.wrt(p).unwrap().norm() > 0.0);
    }
}
