//! Pre-norm encoder-decoder over packed batches, with hand-written backward.
//!
//! Sequences of a batch are concatenated row-wise so every linear layer runs
//! as one matrix product; attention runs per sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;
use super::layout::{AttnIx, Layout, LinearIx, NormIx, Seg};
use super::ops::{self, add_into, AttnShape, NormCache};
use super::prompt::PromptParams;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::vocab::{BOS, EOS, FIRST_PROMPT_ID};

/// Standard deviation of the initial token and position embeddings.
pub const EMB_INIT_STD: f64 = 0.3;

/// One teacher-forced training pair. `tgt` excludes BOS and EOS.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub src: &'a [u32],
    pub tgt: &'a [u32],
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub base: bool,
    pub prompt: bool,
}

#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub base: Option<Vec<F>>,
    pub prompt: Option<Vec<F>>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<F>,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    len: usize,
}

fn spans(lens: impl Iterator<Item = usize>) -> Vec<Span> {
    let mut start = 0;
    lens.map(|len| {
        let s = Span { start, len };
        start += len;
        s
    })
    .collect()
}

fn rows_of<F>(m: &[F], s: Span, d: usize) -> &[F] {
    &m[s.start * d..(s.start + s.len) * d]
}

/// Packed encoder input.
struct Src {
    ids: Vec<u32>,
    slot: Vec<Option<usize>>,
    pos: Vec<usize>,
    spans: Vec<Span>,
    has_prompt: Vec<bool>,
}

/// Packed decoder input: BOS-shifted targets.
struct Tgt {
    ids: Vec<u32>,
    gold: Vec<u32>,
    pos: Vec<usize>,
    spans: Vec<Span>,
}

/// Per-layer prompt key/value rows, `k x d` each.
#[derive(Clone, Copy)]
struct PromptKv<'a, F> {
    keys: &'a [F],
    values: &'a [F],
    n: usize,
}

struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn apply<F: Scalar>(&mut self, x: &mut [F]) -> Option<Vec<F>> {
        let rng = self.rng.as_mut()?;
        if self.rate == 0.0 {
            return None;
        }
        let keep = F::of(1.0 / (1.0 - self.rate));
        let mask: Vec<F> = x
            .iter()
            .map(|_| if rng.random::<f64>() < self.rate { F::zero() } else { keep })
            .collect();
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

fn masked<F: Scalar>(dy: &[F], mask: &Option<Vec<F>>) -> Vec<F> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

/// Mutable gradient destinations; `None` groups are skipped entirely.
struct Sink<'a, F> {
    base: Option<&'a mut [F]>,
    prompt: Option<&'a mut [F]>,
}

impl<F: Scalar> Sink<'_, F> {
    /// Two adjacent segments (weight then bias, gain then bias).
    fn pair(&mut self, a: Seg, b: Seg) -> Option<(&mut [F], &mut [F])> {
        let base = self.base.as_deref_mut()?;
        debug_assert_eq!(a.off + a.len, b.off);
        Some(base[a.off..b.off + b.len].split_at_mut(a.len))
    }

    fn base_row(&mut self, seg: Seg, row: usize, vals: &[F]) {
        if let Some(base) = self.base.as_deref_mut() {
            add_into(seg.row(row, vals.len()).of_mut(base), vals);
        }
    }

    fn prompt_row(&mut self, seg: Seg, row: usize, vals: &[F]) {
        if let Some(p) = self.prompt.as_deref_mut() {
            add_into(seg.row(row, vals.len()).of_mut(p), vals);
        }
    }
}

struct AttnCache<F> {
    q: Vec<F>,
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    prefix: Vec<usize>,
    probs: Vec<Vec<F>>,
    ctx: Vec<F>,
}

struct FfnCache<F> {
    norm: NormCache<F>,
    pre: Vec<F>,
    act: Vec<F>,
    mask: Option<Vec<F>>,
}

struct EncLayerCache<F> {
    norm: NormCache<F>,
    attn: AttnCache<F>,
    mask: Option<Vec<F>>,
    ffn: FfnCache<F>,
}

struct DecLayerCache<F> {
    norm1: NormCache<F>,
    self_attn: AttnCache<F>,
    mask1: Option<Vec<F>>,
    norm2: NormCache<F>,
    cross: AttnCache<F>,
    mask2: Option<Vec<F>>,
    ffn: FfnCache<F>,
}

struct EncCache<F> {
    emb_mask: Option<Vec<F>>,
    layers: Vec<EncLayerCache<F>>,
    norm: NormCache<F>,
}

struct DecCache<F> {
    emb_mask: Option<Vec<F>>,
    layers: Vec<DecLayerCache<F>>,
    norm: NormCache<F>,
    logits: Vec<F>,
}

/// Encoder output of one source with the cross-attention keys and values of
/// every decoder layer precomputed.
#[derive(Debug, Clone)]
pub struct EncodedSource<F> {
    cross_k: Vec<Vec<F>>,
    cross_v: Vec<Vec<F>>,
    prefix_k: Vec<Vec<F>>,
    prefix_v: Vec<Vec<F>>,
    len: usize,
}

impl<F> EncodedSource<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Decoder self-attention keys and values of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderCache<F> {
    self_k: Vec<Vec<F>>,
    self_v: Vec<Vec<F>>,
    steps: usize,
}

impl<F> DecoderCache<F> {
    /// Tokens consumed so far, BOS included.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl<F: Scalar> Model<F> {
    /// Random initialization drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![F::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, EMB_INIT_STD).expect("valid std");
        for seg in [layout.tok_emb, layout.enc_pos, layout.dec_pos] {
            for v in seg.of_mut(&mut params) {
                *v = F::of(normal.sample(&mut rng));
            }
        }
        for lin in layout.weights() {
            let bound = (6.0 / (lin.n_in + lin.n_out) as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("valid bounds");
            for v in lin.w.of_mut(&mut params) {
                *v = F::of(dist.sample(&mut rng));
            }
        }
        for seg in layout.norm_gains() {
            seg.of_mut(&mut params).fill(F::one());
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, the configuration needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        super::checksum(&self.params)
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    fn d(&self) -> usize {
        self.config.d_model
    }

    fn lin(&self, x: &[F], rows: usize, ix: &LinearIx) -> Vec<F> {
        let p = &self.params;
        ops::linear(x, rows, ix.w.of(p), ix.b.of(p), ix.n_in, ix.n_out)
    }

    fn lin_bwd(&self, x: &[F], dy: &[F], rows: usize, ix: &LinearIx, g: &mut Sink<F>) -> Vec<F> {
        let w = ix.w.of(&self.params);
        ops::linear_backward(x, dy, rows, w, ix.n_in, ix.n_out, g.pair(ix.w, ix.b))
    }

    fn norm(&self, x: &[F], rows: usize, ix: &NormIx) -> NormCache<F> {
        let p = &self.params;
        ops::layer_norm(x, rows, self.d(), ix.gain.of(p), ix.bias.of(p))
    }

    fn norm_bwd(&self, c: &NormCache<F>, dy: &[F], rows: usize, ix: &NormIx, g: &mut Sink<F>) -> Vec<F> {
        let gain = ix.gain.of(&self.params);
        ops::layer_norm_backward(c, dy, rows, self.d(), gain, g.pair(ix.gain, ix.bias))
    }

    fn check_prompts(&self, prompts: Option<&PromptParams<F>>) -> Result<()> {
        if let Some(p) = prompts {
            let want = super::layout::PromptLayout::new(&self.config, p.k());
            if p.layout().total != want.total || p.layout().d != self.d() {
                return Err(Error::Shape(
                    "prompt parameters do not match the model configuration".into(),
                ));
            }
        }
        Ok(())
    }

    fn prepare_src(&self, prompts: Option<&PromptParams<F>>, srcs: &[&[u32]]) -> Result<Src> {
        self.check_prompts(prompts)?;
        let first = FIRST_PROMPT_ID;
        let end = first + self.config.prompt_tokens as u32;
        let mut out = Src {
            ids: Vec::new(),
            slot: Vec::new(),
            pos: Vec::new(),
            spans: spans(srcs.iter().map(|s| s.len())),
            has_prompt: Vec::with_capacity(srcs.len()),
        };
        for src in srcs {
            let real = src.iter().filter(|&&id| !(first..end).contains(&id)).count();
            if real > self.config.max_len {
                return Err(Error::Shape(format!(
                    "source has {real} tokens, max_len is {}",
                    self.config.max_len
                )));
            }
            let mut seen = 0;
            let mut any = false;
            for &id in src.iter() {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::Shape(format!(
                        "token id {id} outside vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                out.ids.push(id);
                if (first..end).contains(&id) {
                    let j = (id - first) as usize;
                    match prompts {
                        None => return Err(Error::PromptIdWithoutParams(id)),
                        Some(p) if j >= p.k() => {
                            return Err(Error::Shape(format!(
                                "prompt token {} used but only {} prompt vectors exist",
                                j + 1,
                                p.k()
                            )))
                        }
                        Some(_) => {}
                    }
                    any = true;
                    out.slot.push(Some(j));
                    // a prompt shares the position of the token it precedes
                    out.pos.push(seen.min(self.config.max_len - 1));
                } else {
                    out.slot.push(None);
                    out.pos.push(seen);
                    seen += 1;
                }
            }
            out.has_prompt.push(any);
        }
        Ok(out)
    }

    fn prepare_tgt(&self, tgts: &[&[u32]]) -> Result<Tgt> {
        let mut out = Tgt {
            ids: Vec::new(),
            gold: Vec::new(),
            pos: Vec::new(),
            spans: spans(tgts.iter().map(|t| t.len() + 1)),
        };
        for tgt in tgts {
            if tgt.len() + 1 > self.config.max_len {
                return Err(Error::Shape(format!(
                    "target has {} tokens, max_len is {}",
                    tgt.len() + 1,
                    self.config.max_len
                )));
            }
            if let Some(&bad) = tgt.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Shape(format!("target token id {bad} outside vocabulary")));
            }
            out.ids.push(BOS);
            out.ids.extend_from_slice(tgt);
            out.gold.extend_from_slice(tgt);
            out.gold.push(EOS);
            out.pos.extend(0..=tgt.len());
        }
        Ok(out)
    }

    fn enc_kv<'a>(&self, p: &'a PromptParams<F>, layer: usize) -> PromptKv<'a, F> {
        let l = p.layout();
        PromptKv {
            keys: l.enc_k[layer].of(p.data()),
            values: l.enc_v[layer].of(p.data()),
            n: p.k(),
        }
    }

    fn dec_kv<'a>(&self, p: &'a PromptParams<F>, layer: usize) -> Option<PromptKv<'a, F>> {
        let l = p.layout();
        (self.config.prompt_in_decoder && p.has_decoder_prefix()).then(|| PromptKv {
            keys: l.dec_k[layer].of(p.data()),
            values: l.dec_v[layer].of(p.data()),
            n: p.k(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_fwd(
        &self,
        ix: &AttnIx,
        hq: &[F],
        qs: &[Span],
        hkv: &[F],
        kvs: &[Span],
        causal: bool,
        overrides: Option<(&[Option<usize>], PromptKv<F>)>,
        prefix: Option<(&[bool], PromptKv<F>)>,
    ) -> (Vec<F>, AttnCache<F>) {
        let d = self.d();
        let (rq, rkv) = (hq.len() / d, hkv.len() / d);
        let q = self.lin(hq, rq, &ix.q);
        let mut k = self.lin(hkv, rkv, &ix.k);
        let mut v = self.lin(hkv, rkv, &ix.v);
        if let Some((slots, kv)) = overrides {
            for (r, s) in slots.iter().enumerate() {
                if let Some(j) = *s {
                    k[r * d..(r + 1) * d].copy_from_slice(&kv.keys[j * d..(j + 1) * d]);
                    v[r * d..(r + 1) * d].copy_from_slice(&kv.values[j * d..(j + 1) * d]);
                }
            }
        }
        let mut cache = AttnCache {
            q: Vec::new(),
            k: Vec::with_capacity(qs.len()),
            v: Vec::with_capacity(qs.len()),
            prefix: Vec::with_capacity(qs.len()),
            probs: Vec::with_capacity(qs.len()),
            ctx: vec![F::zero(); rq * d],
        };
        for (s, (&qsp, &kvsp)) in qs.iter().zip(kvs).enumerate() {
            let pre = match prefix {
                Some((has, kv)) if has[s] => Some(kv),
                _ => None,
            };
            let n_pre = pre.map_or(0, |kv| kv.n);
            let mut ks = Vec::with_capacity((n_pre + kvsp.len) * d);
            let mut vs = Vec::with_capacity((n_pre + kvsp.len) * d);
            if let Some(kv) = pre {
                ks.extend_from_slice(kv.keys);
                vs.extend_from_slice(kv.values);
            }
            ks.extend_from_slice(rows_of(&k, kvsp, d));
            vs.extend_from_slice(rows_of(&v, kvsp, d));
            let shape = AttnShape {
                queries: qsp.len,
                keys: n_pre + kvsp.len,
                heads: self.config.heads,
                d_model: d,
                causal_offset: causal.then_some(n_pre),
            };
            let (ctx, probs) = ops::attention(rows_of(&q, qsp, d), &ks, &vs, shape);
            cache.ctx[qsp.start * d..(qsp.start + qsp.len) * d].copy_from_slice(&ctx);
            cache.k.push(ks);
            cache.v.push(vs);
            cache.prefix.push(n_pre);
            cache.probs.push(probs);
        }
        cache.q = q;
        let out = self.lin(&cache.ctx, rq, &ix.o);
        (out, cache)
    }

    /// Returns gradients with respect to the query-side and key/value-side
    /// inputs. Prompt key/value rows receive their gradients through `g`.
    #[allow(clippy::too_many_arguments)]
    fn attn_bwd(
        &self,
        ix: &AttnIx,
        c: &AttnCache<F>,
        dout: &[F],
        hq: &[F],
        qs: &[Span],
        hkv: &[F],
        kvs: &[Span],
        causal: bool,
        g: &mut Sink<F>,
        overrides: Option<(&[Option<usize>], Seg, Seg)>,
        prefix: Option<(Seg, Seg)>,
    ) -> (Vec<F>, Vec<F>) {
        let d = self.d();
        let (rq, rkv) = (hq.len() / d, hkv.len() / d);
        let dctx = self.lin_bwd(&c.ctx, dout, rq, &ix.o, g);
        let mut dq = vec![F::zero(); rq * d];
        let mut dk = vec![F::zero(); rkv * d];
        let mut dv = vec![F::zero(); rkv * d];
        for (s, (&qsp, &kvsp)) in qs.iter().zip(kvs).enumerate() {
            let n_pre = c.prefix[s];
            let shape = AttnShape {
                queries: qsp.len,
                keys: n_pre + kvsp.len,
                heads: self.config.heads,
                d_model: d,
                causal_offset: causal.then_some(n_pre),
            };
            let (dqs, dks, dvs) = ops::attention_backward(
                rows_of(&dctx, qsp, d),
                rows_of(&c.q, qsp, d),
                &c.k[s],
                &c.v[s],
                &c.probs[s],
                shape,
            );
            dq[qsp.start * d..(qsp.start + qsp.len) * d].copy_from_slice(&dqs);
            if n_pre > 0 {
                if let Some((sk, sv)) = prefix {
                    for j in 0..n_pre {
                        g.prompt_row(sk, j, &dks[j * d..(j + 1) * d]);
                        g.prompt_row(sv, j, &dvs[j * d..(j + 1) * d]);
                    }
                }
            }
            let range = kvsp.start * d..(kvsp.start + kvsp.len) * d;
            dk[range.clone()].copy_from_slice(&dks[n_pre * d..]);
            dv[range].copy_from_slice(&dvs[n_pre * d..]);
        }
        if let Some((slots, sk, sv)) = overrides {
            for (r, s) in slots.iter().enumerate() {
                if let Some(j) = *s {
                    let row = r * d..(r + 1) * d;
                    g.prompt_row(sk, j, &dk[row.clone()]);
                    g.prompt_row(sv, j, &dv[row.clone()]);
                    dk[row.clone()].fill(F::zero());
                    dv[row].fill(F::zero());
                }
            }
        }
        let dhq = self.lin_bwd(hq, &dq, rq, &ix.q, g);
        let mut dhkv = self.lin_bwd(hkv, &dk, rkv, &ix.k, g);
        add_into(&mut dhkv, &self.lin_bwd(hkv, &dv, rkv, &ix.v, g));
        (dhq, dhkv)
    }

    fn ffn_fwd(
        &self,
        x: &mut [F],
        norm: &NormIx,
        ff1: &LinearIx,
        ff2: &LinearIx,
        drop: &mut Dropout,
    ) -> FfnCache<F> {
        let rows = x.len() / self.d();
        let n = self.norm(x, rows, norm);
        let pre = self.lin(&n.out, rows, ff1);
        let act = ops::gelu(&pre);
        let mut f = self.lin(&act, rows, ff2);
        let mask = drop.apply(&mut f);
        add_into(x, &f);
        FfnCache {
            norm: n,
            pre,
            act,
            mask,
        }
    }

    /// Adds the FFN branch gradient into `dx`.
    fn ffn_bwd(
        &self,
        c: &FfnCache<F>,
        dx: &mut [F],
        norm: &NormIx,
        ff1: &LinearIx,
        ff2: &LinearIx,
        g: &mut Sink<F>,
    ) {
        let rows = dx.len() / self.d();
        let df = masked(dx, &c.mask);
        let dact = self.lin_bwd(&c.act, &df, rows, ff2, g);
        let dpre = ops::gelu_backward(&c.pre, &dact);
        let dn = self.lin_bwd(&c.norm.out, &dpre, rows, ff1, g);
        add_into(dx, &self.norm_bwd(&c.norm, &dn, rows, norm, g));
    }

    fn encoder_fwd(
        &self,
        prompts: Option<&PromptParams<F>>,
        src: &Src,
        drop: &mut Dropout,
    ) -> EncCache<F> {
        let (d, p, l) = (self.d(), &self.params, &self.layout);
        let rows = src.ids.len();
        let mut x = vec![F::zero(); rows * d];
        for r in 0..rows {
            let emb = match (src.slot[r], prompts) {
                (Some(j), Some(pp)) => pp.layout().emb.row(j, d).of(pp.data()),
                _ => l.tok_emb.row(src.ids[r] as usize, d).of(p),
            };
            let pos = l.enc_pos.row(src.pos[r], d).of(p);
            for (i, o) in x[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = emb[i] + pos[i];
            }
        }
        let emb_mask = drop.apply(&mut x);
        let mut layers = Vec::with_capacity(l.enc.len());
        for (li, ix) in l.enc.iter().enumerate() {
            let norm = self.norm(&x, rows, &ix.ln1);
            let ov = prompts.map(|pp| (src.slot.as_slice(), self.enc_kv(pp, li)));
            let (mut a, attn) =
                self.attn_fwd(&ix.attn, &norm.out, &src.spans, &norm.out, &src.spans, false, ov, None);
            let mask = drop.apply(&mut a);
            add_into(&mut x, &a);
            let ffn = self.ffn_fwd(&mut x, &ix.ln2, &ix.ff1, &ix.ff2, drop);
            layers.push(EncLayerCache {
                norm,
                attn,
                mask,
                ffn,
            });
        }
        let norm = self.norm(&x, rows, &l.enc_norm);
        EncCache {
            emb_mask,
            layers,
            norm,
        }
    }

    fn decoder_fwd(
        &self,
        prompts: Option<&PromptParams<F>>,
        src: &Src,
        enc_out: &[F],
        tgt: &Tgt,
        drop: &mut Dropout,
    ) -> DecCache<F> {
        let (d, p, l) = (self.d(), &self.params, &self.layout);
        let rows = tgt.ids.len();
        let mut x = vec![F::zero(); rows * d];
        for r in 0..rows {
            let emb = l.tok_emb.row(tgt.ids[r] as usize, d).of(p);
            let pos = l.dec_pos.row(tgt.pos[r], d).of(p);
            for (i, o) in x[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = emb[i] + pos[i];
            }
        }
        let emb_mask = drop.apply(&mut x);
        let mut layers = Vec::with_capacity(l.dec.len());
        for (li, ix) in l.dec.iter().enumerate() {
            let norm1 = self.norm(&x, rows, &ix.ln1);
            let prefix = prompts
                .and_then(|pp| self.dec_kv(pp, li))
                .map(|kv| (src.has_prompt.as_slice(), kv));
            let (mut a, self_attn) = self.attn_fwd(
                &ix.self_attn,
                &norm1.out,
                &tgt.spans,
                &norm1.out,
                &tgt.spans,
                true,
                None,
                prefix,
            );
            let mask1 = drop.apply(&mut a);
            add_into(&mut x, &a);
            let norm2 = self.norm(&x, rows, &ix.ln2);
            let (mut c, cross) =
                self.attn_fwd(&ix.cross, &norm2.out, &tgt.spans, enc_out, &src.spans, false, None, None);
            let mask2 = drop.apply(&mut c);
            add_into(&mut x, &c);
            let ffn = self.ffn_fwd(&mut x, &ix.ln3, &ix.ff1, &ix.ff2, drop);
            layers.push(DecLayerCache {
                norm1,
                self_attn,
                mask1,
                norm2,
                cross,
                mask2,
                ffn,
            });
        }
        let norm = self.norm(&x, rows, &l.dec_norm);
        let logits = self.lin(&norm.out, rows, &l.out);
        DecCache {
            emb_mask,
            layers,
            norm,
            logits,
        }
    }

    /// Mean token cross-entropy and its gradient with respect to the logits.
    fn cross_entropy(&self, logits: &[F], gold: &[u32]) -> (f64, Vec<F>) {
        let v = self.config.vocab_size;
        let n = gold.len();
        let scale = F::of(1.0 / n as f64);
        let mut loss = 0.0;
        let mut grad = logits.to_vec();
        for (r, &y) in gold.iter().enumerate() {
            let row = &mut grad[r * v..(r + 1) * v];
            let lp = ops::log_softmax(row);
            loss -= lp[y as usize].as_f64();
            for (g, l) in row.iter_mut().zip(&lp) {
                *g = l.exp() * scale;
            }
            row[y as usize] -= scale;
        }
        (loss / n as f64, grad)
    }

    /// Teacher-forced logits (`rows x vocab`, one row per target position
    /// including the EOS step), without dropout.
    pub fn logits(&self, prompts: Option<&PromptParams<F>>, src: &[u32], tgt: &[u32]) -> Result<Vec<F>> {
        let s = self.prepare_src(prompts, &[src])?;
        let t = self.prepare_tgt(&[tgt])?;
        let mut drop = Dropout { rate: 0.0, rng: None };
        let enc = self.encoder_fwd(prompts, &s, &mut drop);
        Ok(self.decoder_fwd(prompts, &s, &enc.norm.out, &t, &mut drop).logits)
    }

    /// Mean token cross-entropy over the batch, without dropout.
    pub fn loss(&self, prompts: Option<&PromptParams<F>>, batch: &[Pair]) -> Result<f64> {
        let srcs: Vec<&[u32]> = batch.iter().map(|p| p.src).collect();
        let tgts: Vec<&[u32]> = batch.iter().map(|p| p.tgt).collect();
        let s = self.prepare_src(prompts, &srcs)?;
        let t = self.prepare_tgt(&tgts)?;
        let mut drop = Dropout { rate: 0.0, rng: None };
        let enc = self.encoder_fwd(prompts, &s, &mut drop);
        let dec = self.decoder_fwd(prompts, &s, &enc.norm.out, &t, &mut drop);
        Ok(self.cross_entropy(&dec.logits, &t.gold).0)
    }

    /// Loss and gradients. Dropout is active when `rng` is given.
    pub fn loss_and_grad(
        &self,
        prompts: Option<&PromptParams<F>>,
        batch: &[Pair],
        want: Trainable,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Grads<F>)> {
        if want.prompt && prompts.is_none() {
            return Err(Error::Config("prompt gradients requested without prompt parameters".into()));
        }
        let srcs: Vec<&[u32]> = batch.iter().map(|p| p.src).collect();
        let tgts: Vec<&[u32]> = batch.iter().map(|p| p.tgt).collect();
        let src = self.prepare_src(prompts, &srcs)?;
        let tgt = self.prepare_tgt(&tgts)?;
        let mut drop = Dropout {
            rate: self.config.dropout,
            rng,
        };
        let enc = self.encoder_fwd(prompts, &src, &mut drop);
        let enc_out = &enc.norm.out;
        let dec = self.decoder_fwd(prompts, &src, enc_out, &tgt, &mut drop);
        let (loss, dlogits) = self.cross_entropy(&dec.logits, &tgt.gold);

        let mut base = want.base.then(|| vec![F::zero(); self.layout.total]);
        let mut prompt = match (want.prompt, prompts) {
            (true, Some(p)) => Some(vec![F::zero(); p.data().len()]),
            _ => None,
        };
        let mut g = Sink {
            base: base.as_deref_mut(),
            prompt: prompt.as_deref_mut(),
        };
        let pl = prompts.map(|p| p.layout().clone());
        let (d, l) = (self.d(), &self.layout);
        let (rt, rs) = (tgt.ids.len(), src.ids.len());

        let dz = self.lin_bwd(&dec.norm.out, &dlogits, rt, &l.out, &mut g);
        let mut dx = self.norm_bwd(&dec.norm, &dz, rt, &l.dec_norm, &mut g);
        let mut de = vec![F::zero(); rs * d];
        for (li, ix) in l.dec.iter().enumerate().rev() {
            let c = &dec.layers[li];
            self.ffn_bwd(&c.ffn, &mut dx, &ix.ln3, &ix.ff1, &ix.ff2, &mut g);

            let dc = masked(&dx, &c.mask2);
            let (dh2, del) = self.attn_bwd(
                &ix.cross,
                &c.cross,
                &dc,
                &c.norm2.out,
                &tgt.spans,
                enc_out,
                &src.spans,
                false,
                &mut g,
                None,
                None,
            );
            add_into(&mut de, &del);
            add_into(&mut dx, &self.norm_bwd(&c.norm2, &dh2, rt, &ix.ln2, &mut g));

            let da = masked(&dx, &c.mask1);
            let prefix = pl
                .as_ref()
                .filter(|p| self.config.prompt_in_decoder && !p.dec_k.is_empty())
                .map(|p| (p.dec_k[li], p.dec_v[li]));
            let (mut dh1, dkv) = self.attn_bwd(
                &ix.self_attn,
                &c.self_attn,
                &da,
                &c.norm1.out,
                &tgt.spans,
                &c.norm1.out,
                &tgt.spans,
                true,
                &mut g,
                None,
                prefix,
            );
            add_into(&mut dh1, &dkv);
            add_into(&mut dx, &self.norm_bwd(&c.norm1, &dh1, rt, &ix.ln1, &mut g));
        }
        let dx = masked(&dx, &dec.emb_mask);
        for r in 0..rt {
            let row = &dx[r * d..(r + 1) * d];
            g.base_row(l.tok_emb, tgt.ids[r] as usize, row);
            g.base_row(l.dec_pos, tgt.pos[r], row);
        }

        let mut dx = self.norm_bwd(&enc.norm, &de, rs, &l.enc_norm, &mut g);
        for (li, ix) in l.enc.iter().enumerate().rev() {
            let c = &enc.layers[li];
            self.ffn_bwd(&c.ffn, &mut dx, &ix.ln2, &ix.ff1, &ix.ff2, &mut g);
            let da = masked(&dx, &c.mask);
            let ov = pl
                .as_ref()
                .map(|p| (src.slot.as_slice(), p.enc_k[li], p.enc_v[li]));
            let (mut dh, dkv) = self.attn_bwd(
                &ix.attn,
                &c.attn,
                &da,
                &c.norm.out,
                &src.spans,
                &c.norm.out,
                &src.spans,
                false,
                &mut g,
                ov,
                None,
            );
            add_into(&mut dh, &dkv);
            add_into(&mut dx, &self.norm_bwd(&c.norm, &dh, rs, &ix.ln1, &mut g));
        }
        let dx = masked(&dx, &enc.emb_mask);
        for r in 0..rs {
            let row = &dx[r * d..(r + 1) * d];
            match (src.slot[r], &pl) {
                (Some(j), Some(p)) => g.prompt_row(p.emb, j, row),
                _ => g.base_row(l.tok_emb, src.ids[r] as usize, row),
            }
            g.base_row(l.enc_pos, src.pos[r], row);
        }
        Ok((loss, Grads { base, prompt }))
    }

    /// Runs the encoder once for incremental decoding.
    pub fn encode(&self, prompts: Option<&PromptParams<F>>, src: &[u32]) -> Result<EncodedSource<F>> {
        let s = self.prepare_src(prompts, &[src])?;
        let mut drop = Dropout { rate: 0.0, rng: None };
        let enc = self.encoder_fwd(prompts, &s, &mut drop);
        let rows = s.ids.len();
        let mut out = EncodedSource {
            cross_k: Vec::new(),
            cross_v: Vec::new(),
            prefix_k: Vec::new(),
            prefix_v: Vec::new(),
            len: rows,
        };
        for (li, ix) in self.layout.dec.iter().enumerate() {
            out.cross_k.push(self.lin(&enc.norm.out, rows, &ix.cross.k));
            out.cross_v.push(self.lin(&enc.norm.out, rows, &ix.cross.v));
            let prefix = prompts.and_then(|pp| self.dec_kv(pp, li));
            match prefix {
                Some(kv) if s.has_prompt[0] => {
                    out.prefix_k.push(kv.keys.to_vec());
                    out.prefix_v.push(kv.values.to_vec());
                }
                _ => {
                    out.prefix_k.push(Vec::new());
                    out.prefix_v.push(Vec::new());
                }
            }
        }
        Ok(out)
    }

    pub fn start(&self, src: &EncodedSource<F>) -> DecoderCache<F> {
        DecoderCache {
            self_k: src.prefix_k.clone(),
            self_v: src.prefix_v.clone(),
            steps: 0,
        }
    }

    /// Feeds one token to each hypothesis and returns next-token
    /// log-probabilities, one `vocab`-wide row per hypothesis.
    pub fn step(
        &self,
        srcs: &[&EncodedSource<F>],
        caches: &mut [DecoderCache<F>],
        tokens: &[u32],
    ) -> Result<Vec<F>> {
        let (d, p, l) = (self.d(), &self.params, &self.layout);
        let b = tokens.len();
        if srcs.len() != b || caches.len() != b {
            return Err(Error::Shape("step needs one source and cache per token".into()));
        }
        let mut x = vec![F::zero(); b * d];
        for (r, (&tok, cache)) in tokens.iter().zip(caches.iter()).enumerate() {
            if tok as usize >= self.config.vocab_size || cache.steps >= self.config.max_len {
                return Err(Error::Shape(format!(
                    "decoder step {} with token {tok} is out of range",
                    cache.steps
                )));
            }
            let emb = l.tok_emb.row(tok as usize, d).of(p);
            let pos = l.dec_pos.row(cache.steps, d).of(p);
            for (i, o) in x[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = emb[i] + pos[i];
            }
        }
        let heads = self.config.heads;
        let single = |keys: usize| AttnShape {
            queries: 1,
            keys,
            heads,
            d_model: d,
            causal_offset: None,
        };
        for (li, ix) in l.dec.iter().enumerate() {
            let h = self.norm(&x, b, &ix.ln1).out;
            let q = self.lin(&h, b, &ix.self_attn.q);
            let k = self.lin(&h, b, &ix.self_attn.k);
            let v = self.lin(&h, b, &ix.self_attn.v);
            let mut ctx = vec![F::zero(); b * d];
            for (r, cache) in caches.iter_mut().enumerate() {
                cache.self_k[li].extend_from_slice(&k[r * d..(r + 1) * d]);
                cache.self_v[li].extend_from_slice(&v[r * d..(r + 1) * d]);
                let keys = cache.self_k[li].len() / d;
                let (c, _) = ops::attention(
                    &q[r * d..(r + 1) * d],
                    &cache.self_k[li],
                    &cache.self_v[li],
                    single(keys),
                );
                ctx[r * d..(r + 1) * d].copy_from_slice(&c);
            }
            add_into(&mut x, &self.lin(&ctx, b, &ix.self_attn.o));

            let h = self.norm(&x, b, &ix.ln2).out;
            let q = self.lin(&h, b, &ix.cross.q);
            for (r, src) in srcs.iter().enumerate() {
                let (c, _) = ops::attention(
                    &q[r * d..(r + 1) * d],
                    &src.cross_k[li],
                    &src.cross_v[li],
                    single(src.len),
                );
                ctx[r * d..(r + 1) * d].copy_from_slice(&c);
            }
            add_into(&mut x, &self.lin(&ctx, b, &ix.cross.o));

            let h = self.norm(&x, b, &ix.ln3).out;
            let act = ops::gelu(&self.lin(&h, b, &ix.ff1));
            add_into(&mut x, &self.lin(&act, b, &ix.ff2));
        }
        let z = self.norm(&x, b, &l.dec_norm).out;
        let logits = self.lin(&z, b, &l.out);
        for cache in caches.iter_mut() {
            cache.steps += 1;
        }
        let v = self.config.vocab_size;
        Ok(logits.chunks(v).flat_map(ops::log_softmax).collect())
    }
}
