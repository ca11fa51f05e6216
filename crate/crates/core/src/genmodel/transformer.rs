use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::{Graph, NodeId, Segment};
use super::optim::Adam;
use super::tensor::{self, Tensor};
use super::vocab::{Vocab, BOS, EOS, PAD, SEP, UNK};
use super::{
    GenerationResult, GeneratorModel, ModelConfig, Origin, StepLosses, StepObjective, TrainBatch,
};
use crate::domain::TrainPair;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(super) struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Ln,
    self_attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
    out_w: usize,
    out_b: usize,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    d: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str) -> Ln {
        let d = self.d;
        Ln {
            g: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            b: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str) -> Attn {
        let d = self.d;
        let mut lin = |n: &str| {
            (
                self.add(format!("{prefix}.{n}.weight"), d, d, Init::Xavier),
                self.add(format!("{prefix}.{n}.bias"), 1, d, Init::Zeros),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("o");
        Attn {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, hidden: usize) -> Ffn {
        let d = self.d;
        Ffn {
            w1: self.add(format!("{prefix}.ffn1.weight"), d, hidden, Init::Xavier),
            b1: self.add(format!("{prefix}.ffn1.bias"), 1, hidden, Init::Zeros),
            w2: self.add(format!("{prefix}.ffn2.weight"), hidden, d, Init::Xavier),
            b2: self.add(format!("{prefix}.ffn2.bias"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    fn new(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.d_model;
        let mut b = LayoutBuilder {
            specs: Vec::new(),
            d,
        };
        let tok_emb = b.add("embed.tokens".into(), vocab_size, d, Init::Normal);
        let enc_pos = b.add(
            "embed.encoder_positions".into(),
            enc_positions(cfg),
            d,
            Init::Normal,
        );
        let dec_pos = b.add(
            "embed.decoder_positions".into(),
            cfg.max_target_len + 1,
            d,
            Init::Normal,
        );
        let enc = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncLayer {
                    ln1: b.ln(&format!("{p}.ln1")),
                    attn: b.attn(&format!("{p}.self")),
                    ln2: b.ln(&format!("{p}.ln2")),
                    ffn: b.ffn(&p, cfg.ffn_dim),
                }
            })
            .collect();
        let enc_ln = b.ln("encoder.ln");
        let dec = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecLayer {
                    ln1: b.ln(&format!("{p}.ln1")),
                    self_attn: b.attn(&format!("{p}.self")),
                    ln2: b.ln(&format!("{p}.ln2")),
                    cross: b.attn(&format!("{p}.cross")),
                    ln3: b.ln(&format!("{p}.ln3")),
                    ffn: b.ffn(&p, cfg.ffn_dim),
                }
            })
            .collect();
        let dec_ln = b.ln("decoder.ln");
        let out_w = b.add("output.weight".into(), d, vocab_size, Init::Xavier);
        let out_b = b.add("output.bias".into(), 1, vocab_size, Init::Zeros);
        Layout {
            specs: b.specs,
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
        }
    }

    fn init(&self, d: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        self.specs
            .iter()
            .map(|s| {
                let n = s.rows * s.cols;
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Xavier => {
                        let a = (6.0 / (s.rows + s.cols) as f64).sqrt();
                        let u = Uniform::new_inclusive(-a, a).expect("valid range");
                        (0..n).map(|_| u.sample(&mut rng)).collect()
                    }
                };
                Tensor::from_vec(s.rows, s.cols, data)
            })
            .collect()
    }
}

fn enc_positions(cfg: &ModelConfig) -> usize {
    cfg.history_budget + cfg.max_source_len
}

/// Token ids of a batch packed row-wise, one segment per example.
#[derive(Debug, Default)]
struct Packed {
    enc_ids: Vec<usize>,
    enc_pos: Vec<usize>,
    enc_segs: Vec<Segment>,
    dec_in: Vec<usize>,
    dec_pos: Vec<usize>,
    dec_segs: Vec<Segment>,
    targets: Vec<usize>,
}

impl Packed {
    fn push_encoder(&mut self, ids: Vec<usize>) {
        self.enc_segs.push((self.enc_ids.len(), ids.len()));
        self.enc_pos.extend(0..ids.len());
        self.enc_ids.extend(ids);
    }

    fn push_decoder(&mut self, target: Vec<usize>) {
        self.dec_segs.push((self.dec_in.len(), target.len() + 1));
        self.dec_pos.extend(0..=target.len());
        self.dec_in.push(BOS);
        self.dec_in.extend(&target);
        self.targets.extend(target);
        self.targets.push(EOS);
    }
}

/// Dropout source for one forward pass; `None` evaluates deterministically.
type Noise<'a> = Option<&'a mut ChaCha8Rng>;

/// Word-level transformer encoder-decoder (pre-norm, GELU feed-forward).
pub struct TinySeq2Seq {
    vocab: Vocab,
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
    optim: Adam,
    train_rng: ChaCha8Rng,
    encode_calls: AtomicU64,
}

impl Clone for TinySeq2Seq {
    fn clone(&self) -> Self {
        TinySeq2Seq {
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            optim: self.optim.clone(),
            train_rng: self.train_rng.clone(),
            encode_calls: AtomicU64::new(self.encode_calls.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for TinySeq2Seq {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TinySeq2Seq")
            .field("vocab_size", &self.vocab.len())
            .field("config", &self.config)
            .field("initialized", &self.is_initialized())
            .finish()
    }
}

impl TinySeq2Seq {
    /// A model initialized from `config.seed`.
    pub fn new(vocab: Vocab, config: ModelConfig) -> Result<Self> {
        let mut m = Self::uninitialized(vocab, config)?;
        let seed = m.config.seed;
        m.reinitialize(seed);
        Ok(m)
    }

    /// A model without parameters; every inference call fails until
    /// [`GeneratorModel::reinitialize`] is called.
    pub fn uninitialized(vocab: Vocab, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        Ok(TinySeq2Seq {
            optim: Adam::new(config.learning_rate, &[]),
            train_rng: ChaCha8Rng::seed_from_u64(config.seed),
            encode_calls: AtomicU64::new(0),
            params: Vec::new(),
            vocab,
            config,
            layout,
        })
    }

    pub(super) fn from_parts(
        vocab: Vocab,
        config: ModelConfig,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let mut m = Self::uninitialized(vocab, config)?;
        if params.len() != m.layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                m.layout.specs.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&m.layout.specs) {
            if p.shape() != (s.rows, s.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}",
                    s.name,
                    p.shape()
                )));
            }
        }
        m.optim = Adam::new(m.config.learning_rate, &params);
        m.train_rng = ChaCha8Rng::seed_from_u64(seed::derive(m.config.seed, u64::MAX));
        m.params = params;
        Ok(m)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(super) fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    /// A copy of this model with its parameters replaced.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        Self::from_parts(self.vocab.clone(), self.config.clone(), params)
    }

    /// Loss components and parameter gradients of one step objective without
    /// applying an update. Uses the same dropout stream as `train_step`.
    pub fn gradients(
        &self,
        objective: &StepObjective,
    ) -> Result<(StepLosses, Vec<Option<Tensor>>)> {
        self.ensure_init()?;
        let mut probe = self.clone();
        probe.step_graph(objective)
    }

    pub fn is_initialized(&self) -> bool {
        !self.params.is_empty()
    }

    fn ensure_init(&self) -> Result<()> {
        if self.is_initialized() {
            Ok(())
        } else {
            Err(Error::contract("model used before initialization"))
        }
    }

    fn encoder_ids(&self, history: &[String], source: &str) -> Result<Vec<usize>> {
        let mut src = self.vocab.encode(source);
        if src.is_empty() {
            return Err(Error::invalid("source text is empty"));
        }
        src.truncate(self.config.max_source_len);
        let mut hist = Vec::new();
        for h in history {
            hist.extend(self.vocab.encode(h));
            hist.push(SEP);
        }
        let budget = self.config.history_budget;
        let start = hist.len().saturating_sub(budget);
        let mut ids = hist.split_off(start);
        ids.extend(src);
        Ok(ids)
    }

    fn target_ids(&self, target: &str) -> Vec<usize> {
        let mut t = self.vocab.encode(target);
        t.truncate(self.config.max_target_len);
        t
    }

    fn pack(&self, pairs: &[&TrainPair]) -> Result<Packed> {
        let mut p = Packed::default();
        for ex in pairs {
            p.push_encoder(self.encoder_ids(&ex.history, &ex.source)?);
            p.push_decoder(self.target_ids(&ex.target));
        }
        Ok(p)
    }

    fn dropout(&self, g: &mut Graph, x: NodeId, noise: &mut Noise) -> NodeId {
        let rate = self.config.dropout;
        match noise {
            Some(rng) if rate > 0.0 => {
                let n = g.value(x).data.len();
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                g.dropout(x, mask)
            }
            _ => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        a: &Attn,
        x: NodeId,
        mem: NodeId,
        q_segs: &[Segment],
        k_segs: &[Segment],
        causal: bool,
    ) -> NodeId {
        let q = g.linear(x, p[a.wq], p[a.bq]);
        let k = g.linear(mem, p[a.wk], p[a.bk]);
        let v = g.linear(mem, p[a.wv], p[a.bv]);
        let h = g.attention(
            q,
            k,
            v,
            q_segs.to_vec(),
            k_segs.to_vec(),
            self.config.heads,
            causal,
        );
        g.linear(h, p[a.wo], p[a.bo])
    }

    fn ffn_block(&self, g: &mut Graph, p: &[NodeId], f: &Ffn, x: NodeId) -> NodeId {
        let h = g.linear(x, p[f.w1], p[f.b1]);
        let h = g.gelu(h);
        g.linear(h, p[f.w2], p[f.b2])
    }

    fn residual(&self, g: &mut Graph, x: NodeId, y: NodeId, noise: &mut Noise) -> NodeId {
        let y = self.dropout(g, y, noise);
        g.add(x, y)
    }

    fn encoder(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        ids: &[usize],
        pos: &[usize],
        segs: &[Segment],
        noise: &mut Noise,
    ) -> NodeId {
        let l = &self.layout;
        let t = g.embed(p[l.tok_emb], ids.to_vec());
        let e = g.embed(p[l.enc_pos], pos.to_vec());
        let x = g.add(t, e);
        let mut x = self.dropout(g, x, noise);
        for layer in &l.enc {
            let h = g.layer_norm(x, p[layer.ln1.g], p[layer.ln1.b]);
            let a = self.attention_block(g, p, &layer.attn, h, h, segs, segs, false);
            x = self.residual(g, x, a, noise);
            let h = g.layer_norm(x, p[layer.ln2.g], p[layer.ln2.b]);
            let f = self.ffn_block(g, p, &layer.ffn, h);
            x = self.residual(g, x, f, noise);
        }
        g.layer_norm(x, p[l.enc_ln.g], p[l.enc_ln.b])
    }

    fn decoder_logits(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        batch: &Packed,
        mem: NodeId,
        noise: &mut Noise,
    ) -> NodeId {
        let l = &self.layout;
        let t = g.embed(p[l.tok_emb], batch.dec_in.clone());
        let e = g.embed(p[l.dec_pos], batch.dec_pos.clone());
        let x = g.add(t, e);
        let mut x = self.dropout(g, x, noise);
        for layer in &l.dec {
            let h = g.layer_norm(x, p[layer.ln1.g], p[layer.ln1.b]);
            let a = self.attention_block(
                g,
                p,
                &layer.self_attn,
                h,
                h,
                &batch.dec_segs,
                &batch.dec_segs,
                true,
            );
            x = self.residual(g, x, a, noise);
            let h = g.layer_norm(x, p[layer.ln2.g], p[layer.ln2.b]);
            let a = self.attention_block(
                g,
                p,
                &layer.cross,
                h,
                mem,
                &batch.dec_segs,
                &batch.enc_segs,
                false,
            );
            x = self.residual(g, x, a, noise);
            let h = g.layer_norm(x, p[layer.ln3.g], p[layer.ln3.b]);
            let f = self.ffn_block(g, p, &layer.ffn, h);
            x = self.residual(g, x, f, noise);
        }
        let x = g.layer_norm(x, p[l.dec_ln.g], p[l.dec_ln.b]);
        g.linear(x, p[l.out_w], p[l.out_b])
    }

    fn param_nodes(&self, g: &mut Graph) -> Vec<NodeId> {
        (0..self.params.len()).map(|i| g.param(i)).collect()
    }

    /// Per-example teacher-forced token NLLs (target tokens then EOS), no dropout.
    fn token_nlls(&self, pairs: &[&TrainPair]) -> Result<Vec<Vec<f64>>> {
        self.ensure_init()?;
        let batch = self.pack(pairs)?;
        let mut g = Graph::new(&self.params);
        let p = self.param_nodes(&mut g);
        let mem = self.encoder(
            &mut g,
            &p,
            &batch.enc_ids,
            &batch.enc_pos,
            &batch.enc_segs,
            &mut None,
        );
        let logits = self.decoder_logits(&mut g, &p, &batch, mem, &mut None);
        let nll = g.nll(logits, batch.targets.clone());
        let v = g.value(nll);
        Ok(batch
            .dec_segs
            .iter()
            .map(|&(s, n)| v.data[s..s + n].to_vec())
            .collect())
    }

    /// Teacher-forced log-probability of `target`, optionally including the
    /// end-of-sequence symbol. Agrees with [`GeneratorModel::generate`]'s
    /// confidence when fed its output.
    pub fn sequence_log_prob(
        &self,
        history: &[String],
        source: &str,
        target: &str,
        include_eos: bool,
    ) -> Result<f64> {
        let pair = TrainPair {
            history: history.to_vec(),
            source: source.to_string(),
            target: target.to_string(),
            orientation: crate::domain::Orientation::ToFull,
            confidence: None,
        };
        let rows = self.token_nlls(&[&pair])?.remove(0);
        let n = if include_eos {
            rows.len()
        } else {
            rows.len() - 1
        };
        Ok(-rows[..n].iter().sum::<f64>())
    }

    fn pooled(&self, history: &[String], source: &str, noise: &mut Noise) -> Result<Vec<f64>> {
        self.ensure_init()?;
        let ids = self.encoder_ids(history, source)?;
        let pos: Vec<usize> = (0..ids.len()).collect();
        let segs = [(0, ids.len())];
        let mut g = Graph::new(&self.params);
        let p = self.param_nodes(&mut g);
        let enc = self.encoder(&mut g, &p, &ids, &pos, &segs, noise);
        let m = g.segment_mean(enc, segs.to_vec());
        Ok(g.value(m).data.clone())
    }

    fn step_graph(&mut self, obj: &StepObjective) -> Result<(StepLosses, Vec<Option<Tensor>>)> {
        let gold: Vec<&TrainPair> = obj.gold.iter().flat_map(|b| &b.examples).collect();
        let pseudo: Vec<&TrainPair> = obj.pseudo.iter().flat_map(|b| &b.examples).collect();
        let all: Vec<&TrainPair> = gold.iter().chain(&pseudo).copied().collect();
        if all.is_empty() {
            return Err(Error::invalid(format!(
                "step `{}` has no examples",
                obj.label
            )));
        }
        let batch = self.pack(&all)?;
        let mut rng = self.train_rng.clone();
        let mut noise: Noise = Some(&mut rng);
        let mut g = Graph::new(&self.params);
        let p = self.param_nodes(&mut g);

        let mem = self.encoder(
            &mut g,
            &p,
            &batch.enc_ids,
            &batch.enc_pos,
            &batch.enc_segs,
            &mut noise,
        );
        let logits = self.decoder_logits(&mut g, &p, &batch, mem, &mut noise);
        let nll = g.nll(logits, batch.targets.clone());

        let rows = batch.targets.len();
        let mut w_gold = vec![0.0; rows];
        let mut w_pseudo = vec![0.0; rows];
        for (k, &(s, n)) in batch.dec_segs.iter().enumerate() {
            let (w, count) = if k < gold.len() {
                (&mut w_gold, gold.len())
            } else {
                (&mut w_pseudo, pseudo.len())
            };
            w[s..s + n].fill(1.0 / count as f64);
        }
        let mut terms = Vec::new();
        let mut losses = StepLosses::default();
        let lg_gold = g.row_weighted_sum(nll, w_gold);
        let lg_pseudo = g.row_weighted_sum(nll, w_pseudo);
        if let Some(b) = &obj.gold {
            terms.push((lg_gold, b.weight));
        }
        if let Some(b) = &obj.pseudo {
            terms.push((lg_pseudo, b.weight));
        }

        let mut cl = None;
        if let Some(c) = obj.contrastive.filter(|c| c.weight > 0.0 && all.len() >= 2) {
            c.validate()?;
            let q1 = g.segment_mean(mem, batch.enc_segs.clone());
            let enc2 = self.encoder(
                &mut g,
                &p,
                &batch.enc_ids,
                &batch.enc_pos,
                &batch.enc_segs,
                &mut noise,
            );
            let q2 = g.segment_mean(enc2, batch.enc_segs.clone());
            let mut tgt = Packed::default();
            for ex in &all {
                tgt.push_encoder(self.encoder_ids(&ex.history, &ex.target)?);
            }
            let enc_t = self.encoder(
                &mut g,
                &p,
                &tgt.enc_ids,
                &tgt.enc_pos,
                &tgt.enc_segs,
                &mut noise,
            );
            let t = g.segment_mean(enc_t, tgt.enc_segs.clone());

            let pairs = g.interleave(q1, q2);
            let icl = g.nt_xent(pairs, c.tau)?;
            let sum = g.add(q1, q2);
            let avg = g.scale(sum, 0.5);
            let pairs = g.interleave(avg, t);
            let ecl = g.nt_xent(pairs, c.tau)?;
            terms.push((icl, c.weight));
            terms.push((ecl, c.weight));
            cl = Some((icl, ecl));
        }
        let total = g.sum(terms);

        losses.lg_gold = if obj.gold.is_some() {
            g.scalar(lg_gold)
        } else {
            0.0
        };
        losses.lg_pseudo = if obj.pseudo.is_some() {
            g.scalar(lg_pseudo)
        } else {
            0.0
        };
        if let Some((icl, ecl)) = cl {
            losses.l_icl = g.scalar(icl);
            losses.l_ecl = g.scalar(ecl);
        }
        losses.total = g.scalar(total);
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!("batch `{}`", obj.label)));
        }
        let grads = g.backward(total)?;
        drop(g);
        self.train_rng = rng;
        Ok((losses, grads))
    }
}

/// Key/value rows of one decoder layer during incremental decoding.
struct LayerCache {
    self_k: Vec<f64>,
    self_v: Vec<f64>,
    cross_k: Tensor,
    cross_v: Tensor,
}

impl TinySeq2Seq {
    fn ln(&self, x: &Tensor, ln: Ln) -> Tensor {
        tensor::layer_norm(x, &self.params[ln.g], &self.params[ln.b]).0
    }

    fn lin(&self, x: &Tensor, w: usize, b: usize) -> Tensor {
        tensor::linear(x, &self.params[w], &self.params[b])
    }

    fn memory(&self, history: &[String], source: &str) -> Result<Tensor> {
        let ids = self.encoder_ids(history, source)?;
        let pos: Vec<usize> = (0..ids.len()).collect();
        let segs = [(0, ids.len())];
        let mut g = Graph::new(&self.params);
        let p = self.param_nodes(&mut g);
        let enc = self.encoder(&mut g, &p, &ids, &pos, &segs, &mut None);
        Ok(g.value(enc).clone())
    }

    /// Log-softmax over the vocabulary for the next position.
    fn decode_step(&self, caches: &mut [LayerCache], token: usize, pos: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let l = &self.layout;
        let mut x = Tensor::from_vec(1, d, self.params[l.tok_emb].row(token).to_vec());
        for (o, e) in x.data.iter_mut().zip(self.params[l.dec_pos].row(pos)) {
            *o += e;
        }
        for (layer, cache) in l.dec.iter().zip(caches.iter_mut()) {
            let h = self.ln(&x, layer.ln1);
            let a = &layer.self_attn;
            let q = self.lin(&h, a.wq, a.bq);
            cache.self_k.extend(self.lin(&h, a.wk, a.bk).data);
            cache.self_v.extend(self.lin(&h, a.wv, a.bv).data);
            let lk = cache.self_k.len() / d;
            let (out, _) = tensor::attend(
                &q.data,
                &cache.self_k,
                &cache.self_v,
                1,
                lk,
                d,
                heads,
                false,
            );
            x.add_assign(&self.lin(&Tensor::from_vec(1, d, out), a.wo, a.bo));

            let h = self.ln(&x, layer.ln2);
            let a = &layer.cross;
            let q = self.lin(&h, a.wq, a.bq);
            let lk = cache.cross_k.rows;
            let (out, _) = tensor::attend(
                &q.data,
                &cache.cross_k.data,
                &cache.cross_v.data,
                1,
                lk,
                d,
                heads,
                false,
            );
            x.add_assign(&self.lin(&Tensor::from_vec(1, d, out), a.wo, a.bo));

            let h = self.ln(&x, layer.ln3);
            let mut f = self.lin(&h, layer.ffn.w1, layer.ffn.b1);
            for v in &mut f.data {
                *v = tensor::gelu(*v);
            }
            x.add_assign(&self.lin(&f, layer.ffn.w2, layer.ffn.b2));
        }
        let x = self.ln(&x, l.dec_ln);
        let logits = self.lin(&x, l.out_w, l.out_b);
        tensor::log_softmax_row(&logits.data)
    }
}

impl GeneratorModel for TinySeq2Seq {
    fn generate(
        &self,
        history: &[String],
        source: &str,
        max_len: usize,
    ) -> Result<GenerationResult> {
        self.ensure_init()?;
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let mem = self.memory(history, source)?;
        let mut caches: Vec<LayerCache> = self
            .layout
            .dec
            .iter()
            .map(|layer| LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: self.lin(&mem, layer.cross.wk, layer.cross.bk),
                cross_v: self.lin(&mem, layer.cross.wv, layer.cross.bv),
            })
            .collect();
        let steps = max_len.min(self.config.max_target_len);
        let mut out = Vec::with_capacity(steps);
        let mut confidence = 0.0;
        let mut prev = BOS;
        for t in 0..steps {
            let ls = self.decode_step(&mut caches, prev, t);
            let mut best = None::<(usize, f64)>;
            for (id, &v) in ls.iter().enumerate() {
                let banned = matches!(id, PAD | UNK | BOS | SEP) || (id == EOS && t == 0);
                if !banned && best.is_none_or(|(_, b)| v > b) {
                    best = Some((id, v));
                }
            }
            let (id, lp) =
                best.ok_or_else(|| Error::contract("vocabulary has no emittable token"))?;
            confidence += lp;
            if id == EOS {
                break;
            }
            out.push(id);
            prev = id;
        }
        if !confidence.is_finite() {
            return Err(Error::NonFiniteLoss("generation confidence".into()));
        }
        Ok(GenerationResult {
            text: self.vocab.decode(&out),
            confidence,
            token_count: out.len(),
        })
    }

    fn generation_loss(&self, batch: &TrainBatch) -> Result<f64> {
        let pairs: Vec<&TrainPair> = batch.examples.iter().collect();
        if pairs.is_empty() {
            return Err(Error::invalid("generation loss of an empty batch"));
        }
        let rows = self.token_nlls(&pairs)?;
        Ok(rows.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>() / rows.len() as f64)
    }

    fn encode(&self, history: &[String], source: &str, stochastic: bool) -> Result<Vec<f64>> {
        if stochastic {
            let call = self.encode_calls.fetch_add(1, Ordering::Relaxed);
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive(self.config.seed ^ 0x656e_636f_6465, call));
            self.pooled(history, source, &mut Some(&mut rng))
        } else {
            self.pooled(history, source, &mut None)
        }
    }

    fn train_step(&mut self, objective: &StepObjective) -> Result<StepLosses> {
        self.ensure_init()?;
        for b in objective.gold.iter().chain(&objective.pseudo) {
            if b.examples.is_empty() {
                return Err(Error::invalid(format!(
                    "step `{}` has an empty batch",
                    objective.label
                )));
            }
        }
        if let Some(b) = &objective.gold {
            debug_assert_eq!(b.origin, Origin::Gold);
        }
        let (losses, grads) = self.step_graph(objective)?;
        self.optim.update(&mut self.params, &grads);
        Ok(losses)
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
        self.optim.lr = lr;
    }

    fn reinitialize(&mut self, seed: u64) {
        self.config.seed = seed;
        self.params = self.layout.init(self.config.d_model, seed);
        self.optim = Adam::new(self.config.learning_rate, &self.params);
        self.train_rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, u64::MAX));
        self.encode_calls.store(0, Ordering::Relaxed);
    }

    fn checksum(&self) -> u64 {
        // FNV-1a over shapes and parameter bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: [u8; 8]| {
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            feed((p.rows as u64).to_le_bytes());
            feed((p.cols as u64).to_le_bytes());
            for v in &p.data {
                feed(v.to_bits().to_le_bytes());
            }
        }
        h
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.ensure_init()?;
        super::checkpoint::save(self, path)
    }
}
