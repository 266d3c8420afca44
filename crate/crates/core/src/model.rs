//! The assembled per-instance pipeline: evidence graphs for every choice,
//! joint graph encoding, prompted text encoding and the reasoning head.

use std::collections::HashMap;

use gsap_autograd::{BatchStats, Group, Mat, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::QaInstance;
use crate::encoder::{EncoderConfig, FrozenEncoder, Injection, Vocab};
use crate::error::{GsapError, Result};
use crate::gnn::{GnnConfig, GnnOptions, GraphEncoder, GraphInput};
use crate::graph::{
    build_graph, extract_topic_entities, prune_keep, relevance_on_tape, select_qc_triplets, EvidenceGraph, GraphConfig,
};
use crate::hmpr::{argmax, Hmpr, HmprConfig, HmprFlags};
use crate::knowledge::{retrieve_evidence, EvidenceCorpus, ParaphraseDict, TripleStore};
use crate::nn::Linear;
use crate::prompt::{
    assemble_text, extract_segment_embeddings, extract_triplet_outputs, segment_embeddings, AssembledText, PromptConfig,
    PromptFlags, PromptGenerator, TripletRef,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KgSource {
    /// Triple store.
    Conceptnet,
    /// Evidence sentences.
    Wikipedia,
    /// Paraphrase definitions.
    Dictionary,
}

/// Variant switches. All default to the full model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_prompt: bool,
    pub random_prompt: bool,
    pub no_prompt_entity: bool,
    pub no_prompt_relation: bool,
    pub no_paraphrase_nodes: bool,
    pub no_paraphrase_texts: bool,
    pub no_hmpr: bool,
    pub no_bigru: bool,
    pub no_knowledge_attention: bool,
    pub no_relevance_score: bool,
    pub no_graph_attention: bool,
    pub no_sapl: bool,
    pub hmpr_own_gnn: bool,
    /// Knowledge sources in use; `None` means all of them.
    pub kg_sources: Option<Vec<KgSource>>,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.no_prompt && self.random_prompt {
            return Err(GsapError::ConflictingFlags("no_prompt and random_prompt".into()));
        }
        if self.no_sapl && self.random_prompt {
            return Err(GsapError::ConflictingFlags("no_sapl and random_prompt".into()));
        }
        Ok(())
    }

    pub fn uses(&self, s: KgSource) -> bool {
        self.kg_sources.as_ref().is_none_or(|v| v.contains(&s))
    }

    /// Short variant label, `full` when nothing is switched off.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = [
            (self.no_prompt, "no_prompt"),
            (self.random_prompt, "random_prompt"),
            (self.no_prompt_entity, "no_prompt_entity"),
            (self.no_prompt_relation, "no_prompt_relation"),
            (self.no_paraphrase_nodes, "no_paraphrase_nodes"),
            (self.no_paraphrase_texts, "no_paraphrase_texts"),
            (self.no_hmpr, "no_hmpr"),
            (self.no_bigru, "no_bigru"),
            (self.no_knowledge_attention, "no_knowledge_attention"),
            (self.no_relevance_score, "no_relevance_score"),
            (self.no_graph_attention, "no_graph_attention"),
            (self.no_sapl, "no_sapl"),
            (self.hmpr_own_gnn, "hmpr_own_gnn"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n.to_string())
        .collect();
        if let Some(src) = &self.kg_sources {
            let names: Vec<String> =
                src.iter().map(|s| serde_json::to_value(s).unwrap().as_str().unwrap().to_string()).collect();
            parts.push(format!("kg[{}]", names.join("+")));
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub graph_dim: usize,
    pub graph_layers: usize,
    pub prompt_length: usize,
    /// Prompting layers; `None` prompts every encoder layer.
    pub prompt_layers: Option<usize>,
    pub prompt_inner: usize,
    pub fuse_dim: usize,
    pub gru_hidden: usize,
    pub prune_threshold: f64,
    pub graph: GraphConfig,
    pub evidence_top_k: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            graph_dim: 300,
            graph_layers: 5,
            prompt_length: 16,
            prompt_layers: None,
            prompt_inner: 128,
            fuse_dim: 128,
            gru_hidden: 128,
            prune_threshold: 0.1,
            graph: GraphConfig::default(),
            evidence_top_k: 10,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for CPU experiments on the synthetic task.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig { hidden: 32, layers: 2, heads: 2, ffn: 64, max_len: 256, ln_eps: 1e-5 },
            graph_dim: 32,
            graph_layers: 2,
            prompt_inner: 32,
            fuse_dim: 16,
            gru_hidden: 16,
            ..Self::default()
        }
    }

    /// Prompting depth after ablations.
    pub fn effective_prompt_layers(&self) -> usize {
        if self.ablation.no_prompt || self.ablation.no_sapl {
            0
        } else {
            self.prompt_layers.unwrap_or(self.encoder.layers).min(self.encoder.layers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if let Some(p) = self.prompt_layers {
            if p > self.encoder.layers {
                return Err(GsapError::Config(format!("prompt_layers {p} exceeds {} encoder layers", self.encoder.layers)));
            }
        }
        if self.encoder.hidden % self.encoder.heads != 0 {
            return Err(GsapError::Config("encoder hidden size must be divisible by the head count".into()));
        }
        if self.effective_prompt_layers() > 0 && self.prompt_length >= self.encoder.max_len {
            return Err(GsapError::Config("prompt length leaves no room for text".into()));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(GsapError::Config("prune threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Knowledge sources after the source subset of an ablation is applied.
#[derive(Clone, Debug, Default)]
pub struct Knowledge {
    pub triples: TripleStore,
    pub paraphrases: ParaphraseDict,
    pub corpus: EvidenceCorpus,
}

impl Knowledge {
    pub fn new(triples: TripleStore, paraphrases: ParaphraseDict, corpus: EvidenceCorpus) -> Self {
        Self { triples, paraphrases, corpus }
    }

    pub fn restricted(&self, ab: &Ablation) -> Knowledge {
        Knowledge {
            triples: if ab.uses(KgSource::Conceptnet) { self.triples.clone() } else { self.triples.without_triples() },
            paraphrases: if ab.uses(KgSource::Dictionary) { self.paraphrases.clone() } else { ParaphraseDict::new() },
            corpus: if ab.uses(KgSource::Wikipedia) { self.corpus.clone() } else { EvidenceCorpus::default() },
        }
    }

    /// Every string the encoder may need to tokenize.
    pub fn texts(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.triples.entities().collect();
        v.extend(self.triples.relation_vocab().iter().map(String::as_str));
        for (e, d) in self.paraphrases.iter() {
            v.push(e);
            v.push(d);
        }
        v.extend(self.corpus.sentences().iter().map(|s| s.text.as_str()));
        v
    }
}

/// Evidence graph, frozen node features and token ids of one choice.
#[derive(Clone, Debug)]
pub struct PreparedChoice {
    pub graph: EvidenceGraph,
    /// `nodes × hidden` phrase embeddings of the node surfaces.
    pub phi: Mat,
    pub text: AssembledText,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub answer: usize,
    pub phi_question: Mat,
    pub choices: Vec<PreparedChoice>,
}

/// Output of one forward pass over all choices of an instance.
#[derive(Debug)]
pub struct ForwardOut {
    /// `1 × b` pre-ReLU scores.
    pub logits: Var,
    /// Batch statistics to fold into running statistics, per graph encoder.
    pub bn_stats: Vec<(usize, Vec<Option<BatchStats>>)>,
    /// Graphs after pruning, one per choice.
    pub graphs: Vec<EvidenceGraph>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub relation_vocab: Vec<String>,
    pub encoder: FrozenEncoder,
    pub gnn: GraphEncoder,
    pub hmpr_gnn: Option<GraphEncoder>,
    pub node_init: Linear,
    pub relevance: Linear,
    pub prompts: PromptGenerator,
    pub hmpr: Hmpr,
    /// Scalar head on mean text states, used when the reasoning head is ablated.
    pub plain_head: Linear,
}

impl Model {
    /// Parameters are drawn from `cfg.seed`; the vocabulary covers `texts`.
    pub fn new<'a>(cfg: ModelConfig, relation_vocab: &[String], texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let vocab = Vocab::build(texts);
        let h = cfg.encoder.hidden;
        let d = cfg.graph_dim;
        // the encoder is drawn from its own stream so every variant shares it
        let mut enc_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e4c0);
        let encoder = FrozenEncoder::new(&mut store, cfg.encoder.clone(), vocab.len(), &mut enc_rng);
        let gcfg = GnnConfig::new(d, cfg.graph_layers, relation_vocab.len());
        let gnn = GraphEncoder::new(&mut store, "gnn", gcfg.clone(), &mut rng);
        let hmpr_gnn = cfg.ablation.hmpr_own_gnn.then(|| GraphEncoder::new(&mut store, "hmpr_gnn", gcfg, &mut rng));
        let node_init = Linear::new(&mut store, "node_init", h, d, true, Group::Graph, &mut rng);
        let relevance = Linear::new(&mut store, "relevance", 2 * h, 1, true, Group::Graph, &mut rng);
        let pcfg = PromptConfig {
            k: cfg.prompt_length,
            layers: cfg.effective_prompt_layers(),
            hidden: h,
            graph_dim: d,
            inner: cfg.prompt_inner,
            num_relations: relation_vocab.len(),
        };
        let prompts = PromptGenerator::new(&mut store, pcfg, &mut rng);
        let hcfg = HmprConfig { hidden: h, graph_dim: d, fuse: cfg.fuse_dim, gru_hidden: cfg.gru_hidden };
        let hmpr = Hmpr::new(&mut store, hcfg, &mut rng);
        let plain_head = Linear::new(&mut store, "plain_head", h, 1, true, Group::Graph, &mut rng);
        Ok(Self {
            cfg,
            store,
            vocab,
            relation_vocab: relation_vocab.to_vec(),
            encoder,
            gnn,
            hmpr_gnn,
            node_init,
            relevance,
            prompts,
            hmpr,
            plain_head,
        })
    }

    /// Builds a model whose vocabulary covers `knowledge` and `instances`.
    pub fn for_data(cfg: ModelConfig, knowledge: &Knowledge, instances: &[&[QaInstance]]) -> Result<Self> {
        let mut texts = knowledge.texts();
        for set in instances {
            for q in set.iter() {
                texts.push(&q.question);
                texts.extend(q.choices.iter().map(String::as_str));
            }
        }
        Model::new(cfg, knowledge.triples.relation_vocab(), texts)
    }

    pub fn frozen_params(&self) -> Vec<ParamId> {
        self.store.ids_in_group(Group::Frozen)
    }

    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    fn prompt_len(&self) -> usize {
        if self.prompts.cfg.layers > 0 {
            self.cfg.prompt_length
        } else {
            0
        }
    }

    /// Grounds, retrieves and tokenizes one instance. Phrase embeddings are
    /// memoized in `cache` since the encoder never changes.
    pub fn prepare(&self, q: &QaInstance, kn: &Knowledge, cache: &mut HashMap<String, Mat>) -> Result<Prepared> {
        q.validate()?;
        let ab = &self.cfg.ablation;
        let topics = extract_topic_entities(&q.question, &q.choices, &kn.triples)?;
        let mut phi = |s: &str| -> Result<Mat> {
            if let Some(m) = cache.get(s) {
                return Ok(m.clone());
            }
            let m = self.encoder.phrase_embedding(&self.store, &self.vocab, s)?;
            cache.insert(s.to_string(), m.clone());
            Ok(m)
        };
        let phi_question = self.encoder.phrase_embedding(&self.store, &self.vocab, &q.question)?;
        let gcfg = GraphConfig { paraphrase_nodes: self.cfg.graph.paraphrase_nodes && !ab.no_paraphrase_nodes, ..self.cfg.graph.clone() };
        let defs = |ents: &mut dyn Iterator<Item = &String>| -> Vec<String> {
            if ab.no_paraphrase_texts {
                return Vec::new();
            }
            ents.filter_map(|e| kn.paraphrases.get(e).map(str::to_string)).collect()
        };
        let q_defs = defs(&mut topics.question.iter());
        let evidence = retrieve_evidence(&kn.corpus, &q.question, self.cfg.evidence_top_k);
        let budget = self.encoder.cfg.max_len - self.prompt_len();
        let mut choices = Vec::with_capacity(q.choices.len());
        for (i, c) in q.choices.iter().enumerate() {
            let t = topics.for_choice(i);
            let graph = build_graph(&q.question, &t, &kn.triples, &kn.paraphrases, &gcfg);
            let rows: Vec<Mat> = graph.nodes.iter().map(|n| phi(&n.surface)).collect::<Result<_>>()?;
            let refs: Vec<&Mat> = rows.iter().collect();
            let c_defs = defs(&mut t.choices.iter().map(|(e, _)| e));
            let text = assemble_text(&self.vocab, &q.question, c, &q_defs, &c_defs, &evidence, budget)?;
            choices.push(PreparedChoice { graph, phi: Mat::concat_rows(&refs), text });
        }
        Ok(Prepared { id: q.id.clone(), answer: q.answer, phi_question, choices })
    }

    /// Prepares every instance, skipping (and counting) ungrounded questions.
    pub fn prepare_all(&self, data: &[QaInstance], kn: &Knowledge) -> Result<(Vec<Prepared>, usize)> {
        let mut cache = HashMap::new();
        let mut out = Vec::with_capacity(data.len());
        let mut skipped = 0;
        for q in data {
            match self.prepare(q, kn, &mut cache) {
                Ok(p) => out.push(p),
                Err(GsapError::QuestionUngrounded(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((out, skipped))
    }

    /// Scores every choice of `p`. In training mode graph normalization uses
    /// batch statistics over all choice graphs of the instance.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, p: &Prepared, train: bool, rng: &mut R) -> Result<ForwardOut> {
        let ab = &self.cfg.ablation;
        let store = &self.store;
        let b = p.choices.len();
        let phi_q = tape.constant(p.phi_question.clone());

        // relevance, pruning and triplet selection per choice
        let mut graphs = Vec::with_capacity(b);
        let mut phi_rows: Vec<Mat> = Vec::with_capacity(b);
        let mut lambdas: Vec<Var> = Vec::with_capacity(b);
        for c in &p.choices {
            let n = c.graph.node_count();
            let lam = if ab.no_relevance_score {
                tape.constant(Mat::filled(n, 1, 0.5))
            } else {
                let pn = tape.constant(c.phi.clone());
                relevance_on_tape(tape, store, &self.relevance, pn, phi_q)
            };
            let mut g = c.graph.clone();
            for (node, &v) in g.nodes.iter_mut().zip(tape.value(lam).data()) {
                node.relevance = v;
            }
            let keep = if ab.no_relevance_score { (0..n).collect() } else { prune_keep(&g, self.cfg.prune_threshold) };
            let g = g.induced(&keep);
            phi_rows.push(c.phi.gather_rows(&keep));
            lambdas.push(tape.gather_rows(lam, &keep));
            graphs.push(g);
        }
        let refs: Vec<&EvidenceGraph> = graphs.iter().collect();
        let input = GraphInput::from_graphs(&refs, &self.relation_vocab)?;
        let mut offsets = Vec::with_capacity(b);
        let mut acc = 0;
        for g in &graphs {
            offsets.push(acc);
            acc += g.node_count();
        }
        let phi_refs: Vec<&Mat> = phi_rows.iter().collect();
        let phi_all = tape.constant(Mat::concat_rows(&phi_refs));
        let h0 = self.node_init.forward(tape, store, phi_all);
        let lam_all = tape.concat_rows(&lambdas);
        let opts = GnnOptions { train, uniform_attention: ab.no_graph_attention };
        let enc = self.gnn.encode(tape, store, &input, h0, lam_all, opts)?;
        let mut bn_stats = vec![(0, enc.batch_stats)];

        let mut segs: Vec<[Var; 3]> = Vec::with_capacity(b);
        let mut updates: Vec<(usize, Var)> = Vec::new();
        let mut plain_logits: Vec<Var> = Vec::new();
        let flags = PromptFlags { random: ab.random_prompt, no_entity: ab.no_prompt_entity, no_relation: ab.no_prompt_relation };
        for (i, c) in p.choices.iter().enumerate() {
            if ab.no_sapl {
                let emb = tape.embed(store, self.encoder.tok_emb, &c.text.tokens);
                segs.push(segment_embeddings(tape, emb, &c.text, 0));
                if ab.no_hmpr {
                    let m = tape.mean_rows(emb);
                    plain_logits.push(self.plain_head.forward(tape, store, m));
                }
                continue;
            }
            let inj_set = if self.prompts.cfg.layers > 0 {
                let trips: Vec<TripletRef> = select_qc_triplets(&graphs[i])
                    .iter()
                    .map(|t| {
                        let rel = self.relation_vocab.iter().position(|r| *r == t.relation).expect("relation checked by GraphInput");
                        TripletRef { head: offsets[i] + t.head, relation: rel, tail: offsets[i] + t.tail }
                    })
                    .collect();
                let gi = tape.slice_rows(enc.pooled, i, 1);
                let set = self.prompts.generate(tape, store, &trips, enc.states, gi, flags, rng);
                Some((set, trips))
            } else {
                None
            };
            let inj = inj_set.as_ref().map_or_else(Injection::none, |(s, _)| Injection { layers: s.layers.clone() });
            let out = self.encoder.encode(tape, store, &c.text.tokens, &inj)?;
            segs.push(extract_segment_embeddings(tape, &out, &c.text));
            if let Some((set, trips)) = &inj_set {
                for (ti, rows) in extract_triplet_outputs(tape, &out, set) {
                    let head = tape.slice_rows(rows, 0, 1);
                    let tail = tape.slice_rows(rows, 2, 1);
                    updates.push((trips[ti].head, head));
                    updates.push((trips[ti].tail, tail));
                }
            }
            if ab.no_hmpr {
                let n = c.text.len();
                let text_states = tape.slice_rows(out.last, out.prompt_len, n);
                let m = tape.mean_rows(text_states);
                plain_logits.push(self.plain_head.forward(tape, store, m));
            }
        }

        let logits = if ab.no_hmpr {
            let col = tape.concat_rows(&plain_logits);
            tape.transpose(col)
        } else {
            let h_ref = self.hmpr.refresh_states(tape, store, h0, &updates);
            let (which, gnn) = match &self.hmpr_gnn {
                Some(g) => (1, g),
                None => (0, &self.gnn),
            };
            let enc2 = gnn.encode(tape, store, &input, h_ref, lam_all, opts)?;
            bn_stats.push((which, enc2.batch_stats));
            let stacked: [Var; 3] = [0, 1, 2].map(|j| {
                let rows: Vec<Var> = segs.iter().map(|s| s[j]).collect();
                tape.concat_rows(&rows)
            });
            let hflags = HmprFlags { no_bigru: ab.no_bigru, no_knowledge_attention: ab.no_knowledge_attention };
            let fusion = self.hmpr.forward(tape, store, stacked, enc2.pooled, hflags);
            tape.transpose(fusion.logits)
        };
        Ok(ForwardOut { logits, bn_stats, graphs })
    }

    /// Folds batch statistics from a training forward into the running statistics.
    pub fn apply_bn_updates(&mut self, stats: &[(usize, Vec<Option<BatchStats>>)]) {
        for (which, s) in stats {
            let enc = if *which == 1 { self.hmpr_gnn.as_ref().expect("own gnn") } else { &self.gnn };
            enc.update_running(&mut self.store, s);
        }
    }

    /// Evaluation-mode prediction: post-ReLU scores and the chosen index.
    pub fn predict(&self, p: &Prepared) -> Result<(Vec<f64>, usize)> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, p, false, &mut rng)?;
        let logits = tape.value(out.logits).data().to_vec();
        let scores = logits.iter().map(|v| v.max(0.0)).collect();
        Ok((scores, argmax(&logits)))
    }
}
