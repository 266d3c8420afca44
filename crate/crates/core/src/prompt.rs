//! QA text assembly and structure-aware prompt generation.

use gsap_autograd::{Group, Mat, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderOutput, Vocab, CLS, SEP};
use crate::error::{GsapError, Result};
use crate::nn::Linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Question,
    QuestionParaphrase,
    Choice,
    ChoiceParaphrase,
    Evidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Head,
    Relation,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Prompt position; `triplet` is `None` for null prompts.
    Prompt { triplet: Option<(usize, Slot)> },
    Cls,
    Sep,
    Text(Segment),
}

/// Token ids of one (question, choice) pair with the segment of every position.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledText {
    pub tokens: Vec<usize>,
    pub roles: Vec<Role>,
}

impl AssembledText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions(&self, segments: &[Segment]) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, Role::Text(s) if segments.contains(s)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// `[CLS] question q-paraphrase [SEP] choice c-paraphrase [SEP] evidence`,
/// cut from the tail to at most `max_tokens` positions.
pub fn assemble_text(
    vocab: &Vocab,
    question: &str,
    choice: &str,
    question_paraphrases: &[String],
    choice_paraphrases: &[String],
    evidence: &[String],
    max_tokens: usize,
) -> Result<AssembledText> {
    let q = vocab.encode(question);
    if q.is_empty() {
        return Err(GsapError::EmptyQuestion);
    }
    let mut t = AssembledText { tokens: vec![CLS], roles: vec![Role::Cls] };
    let push = |t: &mut AssembledText, ids: Vec<usize>, seg: Segment| {
        t.roles.extend(std::iter::repeat_n(Role::Text(seg), ids.len()));
        t.tokens.extend(ids);
    };
    push(&mut t, q, Segment::Question);
    for p in question_paraphrases {
        push(&mut t, vocab.encode(p), Segment::QuestionParaphrase);
    }
    t.tokens.push(SEP);
    t.roles.push(Role::Sep);
    push(&mut t, vocab.encode(choice), Segment::Choice);
    for p in choice_paraphrases {
        push(&mut t, vocab.encode(p), Segment::ChoiceParaphrase);
    }
    t.tokens.push(SEP);
    t.roles.push(Role::Sep);
    for e in evidence {
        push(&mut t, vocab.encode(e), Segment::Evidence);
    }
    t.tokens.truncate(max_tokens);
    t.roles.truncate(max_tokens);
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Prompt length per prompting layer.
    pub k: usize,
    /// Number of prompting layers, counted from the first.
    pub layers: usize,
    pub hidden: usize,
    pub graph_dim: usize,
    /// Inner width of the prompt MLP.
    pub inner: usize,
    pub num_relations: usize,
}

impl PromptConfig {
    /// Triplets that fit in one layer.
    pub fn per_layer(&self) -> usize {
        self.k / 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotAssignment {
    pub layer: usize,
    /// Position of the head slot; relation and tail follow.
    pub offset: usize,
}

/// Round-robin placement by rank: triplet `i` goes to layer `i mod p` at
/// offset `3·(i div p)`. Triplets beyond the `p·⌊k/3⌋` capacity get `None`.
pub fn assign_slots(n_triplets: usize, k: usize, p: usize) -> Vec<Option<SlotAssignment>> {
    let cap = if p == 0 { 0 } else { p * (k / 3) };
    (0..n_triplets)
        .map(|i| (i < cap).then(|| SlotAssignment { layer: i % p, offset: 3 * (i / p) }))
        .collect()
}

/// One triplet to encode: rows of the graph node states and a relation id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletRef {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFlags {
    /// Fresh unit-normal prompts on every forward.
    pub random: bool,
    /// Null rows in place of head/tail prompts.
    pub no_entity: bool,
    /// Null rows in place of relation prompts.
    pub no_relation: bool,
}

#[derive(Debug)]
pub struct PromptSet {
    /// `k × hidden` prompt rows per prompting layer.
    pub layers: Vec<Var>,
    /// Placement of every input triplet.
    pub assignment: Vec<Option<SlotAssignment>>,
    /// Role of each prompt position, per layer.
    pub roles: Vec<Vec<Role>>,
}

#[derive(Clone, Debug)]
pub struct PromptGenerator {
    pub cfg: PromptConfig,
    pub w_in: Linear,
    pub w_out: Linear,
    pub w_g: Linear,
    /// Graph node states into prompt space.
    pub entity: Linear,
    pub relations: ParamId,
    pub null: ParamId,
}

impl PromptGenerator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: PromptConfig, rng: &mut R) -> Self {
        let g = Group::LanguageSide;
        let (h, d) = (cfg.hidden, cfg.graph_dim);
        let w_in = Linear::new(store, "prompt.w_in", h, cfg.inner, false, g, rng);
        let w_out = Linear::new(store, "prompt.w_out", cfg.inner, h, false, g, rng);
        let w_g = Linear::new(store, "prompt.w_g", d, h, false, g, rng);
        let entity = Linear::new(store, "prompt.entity", d, h, true, g, rng);
        let relations = store.add("prompt.relations", Mat::randn(cfg.num_relations, h, 1.0, rng), g);
        let null = store.add("prompt.null", Mat::randn((cfg.layers * cfg.k).max(1), h, 1.0, rng), g);
        Self { cfg, w_in, w_out, w_g, entity, relations, null }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.w_in.params();
        v.extend(self.w_out.params());
        v.extend(self.w_g.params());
        v.extend(self.entity.params());
        v.push(self.relations);
        v.push(self.null);
        v
    }

    /// `W_out · ReLU(W_in · (e + W_g · g))` for every row of `e`.
    pub fn mlp(&self, tape: &mut Tape, store: &ParamStore, e: Var, g: Var) -> Var {
        let gp = self.w_g.forward(tape, store, g);
        let x = tape.add_row(e, gp);
        let x = self.w_in.forward(tape, store, x);
        let x = tape.relu(x);
        self.w_out.forward(tape, store, x)
    }

    /// Prompt rows for every prompting layer. `states` are graph node states
    /// (`nodes × graph_dim`), `g` is the `1 × graph_dim` graph embedding.
    #[allow(clippy::too_many_arguments)]
    pub fn generate<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        triplets: &[TripletRef],
        states: Var,
        g: Var,
        flags: PromptFlags,
        rng: &mut R,
    ) -> PromptSet {
        let (k, p, h) = (self.cfg.k, self.cfg.layers, self.cfg.hidden);
        let assignment = assign_slots(triplets.len(), k, p);
        let placed: Vec<usize> = (0..triplets.len()).filter(|&i| assignment[i].is_some()).collect();
        let t = placed.len();

        // source rows: [F(heads); F(relations); F(tails); null table]
        let null = tape.param(store, self.null);
        let source = if t > 0 {
            let hi: Vec<usize> = placed.iter().map(|&i| triplets[i].head).collect();
            let ti: Vec<usize> = placed.iter().map(|&i| triplets[i].tail).collect();
            let ri: Vec<usize> = placed.iter().map(|&i| triplets[i].relation).collect();
            let heads = tape.gather_rows(states, &hi);
            let heads = self.entity.forward(tape, store, heads);
            let tails = tape.gather_rows(states, &ti);
            let tails = self.entity.forward(tape, store, tails);
            let rels = tape.embed(store, self.relations, &ri);
            let e = tape.concat_rows(&[heads, rels, tails]);
            let f = self.mlp(tape, store, e, g);
            tape.concat_rows(&[f, null])
        } else {
            null
        };

        let mut idx: Vec<Vec<usize>> = (0..p).map(|j| (0..k).map(|pos| 3 * t + j * k + pos).collect()).collect();
        let mut roles: Vec<Vec<Role>> = vec![vec![Role::Prompt { triplet: None }; k]; p];
        for (rank, &i) in placed.iter().enumerate() {
            let a = assignment[i].expect("placed triplet");
            for (s, slot) in [Slot::Head, Slot::Relation, Slot::Tail].into_iter().enumerate() {
                roles[a.layer][a.offset + s] = Role::Prompt { triplet: Some((i, slot)) };
                let nulled = match slot {
                    Slot::Relation => flags.no_relation,
                    _ => flags.no_entity,
                };
                if !nulled {
                    idx[a.layer][a.offset + s] = s * t + rank;
                }
            }
        }
        let layers = (0..p)
            .map(|j| {
                if flags.random {
                    tape.constant(Mat::randn(k, h, 1.0, rng))
                } else {
                    tape.gather_rows(source, &idx[j])
                }
            })
            .collect();
        PromptSet { layers, assignment, roles }
    }
}

/// Encoder states at the slots of every placed triplet (`3 × hidden`, rows
/// head/relation/tail). Triplets on layer `j < p` are read from layer `j`'s
/// output, before the next layer's prompts replace them; the rest from the
/// final layer.
pub fn extract_triplet_outputs(tape: &mut Tape, out: &EncoderOutput, set: &PromptSet) -> Vec<(usize, Var)> {
    let p = set.layers.len();
    set.assignment
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|a| (i, a)))
        .map(|(i, a)| {
            let src = if a.layer + 1 < p { out.layer_outputs[a.layer] } else { out.last };
            (i, tape.slice_rows(src, a.offset, 3))
        })
        .collect()
}

pub const SEGMENT_GROUPS: [&[Segment]; 3] = [
    &[Segment::Question, Segment::QuestionParaphrase],
    &[Segment::Choice, Segment::ChoiceParaphrase],
    &[Segment::Evidence],
];

/// L2-normalized means of `states` over the question, choice and evidence
/// groups; an empty group gives a zero row. `offset` is the prompt length.
pub fn segment_embeddings(tape: &mut Tape, states: Var, text: &AssembledText, offset: usize) -> [Var; 3] {
    let cols = tape.shape(states).1;
    SEGMENT_GROUPS.map(|group| {
        let pos: Vec<usize> = text.positions(group).into_iter().map(|i| i + offset).collect();
        if pos.is_empty() {
            tape.constant(Mat::zeros(1, cols))
        } else {
            let rows = tape.gather_rows(states, &pos);
            let m = tape.mean_rows(rows);
            tape.l2_normalize_rows(m)
        }
    })
}

pub fn extract_segment_embeddings(tape: &mut Tape, out: &EncoderOutput, text: &AssembledText) -> [Var; 3] {
    segment_embeddings(tape, out.last, text, out.prompt_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_segments_collapse() {
        let v = Vocab::build(["what eats grass", "cow"]);
        let t = assemble_text(&v, "what eats grass", "cow", &[], &[], &[], 256).unwrap();
        assert_eq!(t.tokens, vec![CLS, 4, 5, 6, SEP, 7, SEP]);
        assert_eq!(t.roles[0], Role::Cls);
        assert_eq!(t.roles[5], Role::Text(Segment::Choice));
    }

    #[test]
    fn long_input_is_cut_from_the_evidence_end() {
        let v = Vocab::build(["a b c"]);
        let ev: Vec<String> = (0..200).map(|_| "a b c".to_string()).collect();
        let t = assemble_text(&v, "a", "b", &[], &[], &ev, 256).unwrap();
        assert_eq!(t.len(), 256);
        assert_eq!(t.roles[255], Role::Text(Segment::Evidence));
        assert_eq!(t.positions(&[Segment::Choice]), vec![3]);
    }

    #[test]
    fn empty_question_rejected() {
        let v = Vocab::build(["a"]);
        assert!(matches!(assemble_text(&v, "  ?", "a", &[], &[], &[], 256), Err(GsapError::EmptyQuestion)));
    }

    #[test]
    fn round_robin_assignment() {
        let a = assign_slots(5, 6, 2);
        assert_eq!(a[0], Some(SlotAssignment { layer: 0, offset: 0 }));
        assert_eq!(a[1], Some(SlotAssignment { layer: 1, offset: 0 }));
        assert_eq!(a[2], Some(SlotAssignment { layer: 0, offset: 3 }));
        assert_eq!(a[3], Some(SlotAssignment { layer: 1, offset: 3 }));
        assert_eq!(a[4], None);
        assert!(assign_slots(3, 2, 4).iter().all(Option::is_none));
    }

    fn generator(k: usize, p: usize) -> (ParamStore, PromptGenerator) {
        let mut store = ParamStore::new();
        let cfg = PromptConfig { k, layers: p, hidden: 4, graph_dim: 4, inner: 4, num_relations: 3 };
        let g = PromptGenerator::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(1));
        (store, g)
    }

    #[test]
    fn no_triplets_gives_null_prompts() {
        let (store, gen) = generator(4, 2);
        let mut tape = Tape::new();
        let s = tape.constant(Mat::zeros(1, 4));
        let g = tape.constant(Mat::zeros(1, 4));
        let set = gen.generate(&mut tape, &store, &[], s, g, PromptFlags::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(set.layers.len(), 2);
        let rows = Mat::concat_rows(&[tape.value(set.layers[0]), tape.value(set.layers[1])]);
        assert_eq!(&rows, store.get(gen.null));
    }

    #[test]
    fn identity_mlp_passes_nonnegative_rows() {
        let (mut store, gen) = generator(3, 1);
        store.set(gen.w_in.w, Mat::identity(4));
        store.set(gen.w_out.w, Mat::identity(4));
        store.set(gen.w_g.w, Mat::zeros(4, 4));
        let e = Mat::from_rows(&[vec![0.0, 1.0, 2.5, 0.3]]);
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let g = tape.constant(Mat::randn(1, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let f = gen.mlp(&mut tape, &store, ev, g);
        assert_eq!(tape.value(f), &e);
    }

    #[test]
    fn ablations_replace_slots_with_null_rows() {
        let (store, gen) = generator(3, 1);
        let mut tape = Tape::new();
        let s = tape.constant(Mat::randn(2, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let g = tape.constant(Mat::randn(1, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        let trip = [TripletRef { head: 0, relation: 2, tail: 1 }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = gen.generate(&mut tape, &store, &trip, s, g, PromptFlags::default(), &mut rng);
        let flags = PromptFlags { no_entity: true, ..Default::default() };
        let ent = gen.generate(&mut tape, &store, &trip, s, g, flags, &mut rng);
        let (f, e) = (tape.value(full.layers[0]).clone(), tape.value(ent.layers[0]).clone());
        let null = store.get(gen.null);
        assert_eq!(e.row(0), null.row(0));
        assert_eq!(e.row(2), null.row(2));
        assert_eq!(e.row(1), f.row(1));
        assert_ne!(f.row(0), null.row(0));
    }
}
