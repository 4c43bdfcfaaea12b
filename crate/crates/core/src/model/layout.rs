//! Offsets of every tensor inside the flat parameter vectors.

use super::config::ModelConfig;

/// A contiguous slice of a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seg {
    pub off: usize,
    pub len: usize,
}

impl Seg {
    pub fn of<'a, F>(&self, v: &'a [F]) -> &'a [F] {
        &v[self.off..self.off + self.len]
    }

    pub fn of_mut<'a, F>(&self, v: &'a mut [F]) -> &'a mut [F] {
        &mut v[self.off..self.off + self.len]
    }

    /// Row `i` of a matrix with `width` columns stored in this segment.
    pub fn row(&self, i: usize, width: usize) -> Seg {
        debug_assert!((i + 1) * width <= self.len);
        Seg {
            off: self.off + i * width,
            len: width,
        }
    }
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, len: usize) -> Seg {
        let s = Seg { off: self.0, len };
        self.0 += len;
        s
    }

    fn norm(&mut self, d: usize) -> NormIx {
        NormIx {
            gain: self.take(d),
            bias: self.take(d),
        }
    }

    fn linear(&mut self, n_in: usize, n_out: usize) -> LinearIx {
        LinearIx {
            w: self.take(n_in * n_out),
            b: self.take(n_out),
            n_in,
            n_out,
        }
    }

    fn attn(&mut self, d: usize) -> AttnIx {
        AttnIx {
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            o: self.linear(d, d),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormIx {
    pub gain: Seg,
    pub bias: Seg,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIx {
    pub w: Seg,
    pub b: Seg,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIx {
    pub q: LinearIx,
    pub k: LinearIx,
    pub v: LinearIx,
    pub o: LinearIx,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerIx {
    pub ln1: NormIx,
    pub attn: AttnIx,
    pub ln2: NormIx,
    pub ff1: LinearIx,
    pub ff2: LinearIx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerIx {
    pub ln1: NormIx,
    pub self_attn: AttnIx,
    pub ln2: NormIx,
    pub cross: AttnIx,
    pub ln3: NormIx,
    pub ff1: LinearIx,
    pub ff2: LinearIx,
}

/// Base model layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: Seg,
    pub enc_pos: Seg,
    pub dec_pos: Seg,
    pub enc: Vec<EncLayerIx>,
    pub enc_norm: NormIx,
    pub dec: Vec<DecLayerIx>,
    pub dec_norm: NormIx,
    pub out: LinearIx,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut a = Alloc(0);
        let tok_emb = a.take(c.vocab_size * d);
        let enc_pos = a.take(c.max_len * d);
        let dec_pos = a.take(c.max_len * d);
        let enc = (0..c.enc_layers)
            .map(|_| EncLayerIx {
                ln1: a.norm(d),
                attn: a.attn(d),
                ln2: a.norm(d),
                ff1: a.linear(d, c.ff_dim),
                ff2: a.linear(c.ff_dim, d),
            })
            .collect();
        let enc_norm = a.norm(d);
        let dec = (0..c.dec_layers)
            .map(|_| DecLayerIx {
                ln1: a.norm(d),
                self_attn: a.attn(d),
                ln2: a.norm(d),
                cross: a.attn(d),
                ln3: a.norm(d),
                ff1: a.linear(d, c.ff_dim),
                ff2: a.linear(c.ff_dim, d),
            })
            .collect();
        let dec_norm = a.norm(d);
        let out = a.linear(d, c.vocab_size);
        Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_norm,
            dec,
            dec_norm,
            out,
            total: a.0,
        }
    }

    /// Layer-norm gains, which start at one; every other tensor is random or
    /// zero.
    pub fn norm_gains(&self) -> Vec<Seg> {
        let mut v: Vec<Seg> = Vec::new();
        for l in &self.enc {
            v.extend([l.ln1.gain, l.ln2.gain]);
        }
        for l in &self.dec {
            v.extend([l.ln1.gain, l.ln2.gain, l.ln3.gain]);
        }
        v.extend([self.enc_norm.gain, self.dec_norm.gain]);
        v
    }

    /// Weight matrices with their fan-in and fan-out.
    pub fn weights(&self) -> Vec<LinearIx> {
        let mut v = Vec::new();
        for l in &self.enc {
            v.extend([l.attn.q, l.attn.k, l.attn.v, l.attn.o, l.ff1, l.ff2]);
        }
        for l in &self.dec {
            let (s, x) = (l.self_attn, l.cross);
            v.extend([s.q, s.k, s.v, s.o, x.q, x.k, x.v, x.o, l.ff1, l.ff2]);
        }
        v.push(self.out);
        v
    }
}

/// Layout of the prompt parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub k: usize,
    pub d: usize,
    pub emb: Seg,
    pub enc_k: Vec<Seg>,
    pub enc_v: Vec<Seg>,
    /// Empty unless decoder prefixes are enabled.
    pub dec_k: Vec<Seg>,
    pub dec_v: Vec<Seg>,
    pub total: usize,
}

impl PromptLayout {
    pub fn new(c: &ModelConfig, k: usize) -> Self {
        let d = c.d_model;
        let mut a = Alloc(0);
        let emb = a.take(k * d);
        let enc_k = (0..c.enc_layers).map(|_| a.take(k * d)).collect();
        let enc_v = (0..c.enc_layers).map(|_| a.take(k * d)).collect();
        let n_dec = if c.prompt_in_decoder { c.dec_layers } else { 0 };
        let dec_k = (0..n_dec).map(|_| a.take(k * d)).collect();
        let dec_v = (0..n_dec).map(|_| a.take(k * d)).collect();
        PromptLayout {
            k,
            d,
            emb,
            enc_k,
            enc_v,
            dec_k,
            dec_v,
            total: a.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_tile_the_vector() {
        let c = ModelConfig {
            vocab_size: 20,
            prompt_tokens: 3,
            ..ModelConfig::default()
        };
        let l = Layout::new(&c);
        let mut segs = vec![l.tok_emb, l.enc_pos, l.dec_pos];
        for e in &l.enc {
            segs.extend([e.ln1.gain, e.ln1.bias, e.ln2.gain, e.ln2.bias]);
            for x in [e.attn.q, e.attn.k, e.attn.v, e.attn.o, e.ff1, e.ff2] {
                segs.extend([x.w, x.b]);
            }
        }
        for e in &l.dec {
            for n in [e.ln1, e.ln2, e.ln3] {
                segs.extend([n.gain, n.bias]);
            }
            for x in [e.self_attn.q, e.self_attn.k, e.self_attn.v, e.self_attn.o] {
                segs.extend([x.w, x.b]);
            }
            for x in [e.cross.q, e.cross.k, e.cross.v, e.cross.o, e.ff1, e.ff2] {
                segs.extend([x.w, x.b]);
            }
        }
        for n in [l.enc_norm, l.dec_norm] {
            segs.extend([n.gain, n.bias]);
        }
        segs.extend([l.out.w, l.out.b]);
        segs.sort_by_key(|s| s.off);
        let mut next = 0;
        for s in segs {
            assert_eq!(s.off, next);
            next += s.len;
        }
        assert_eq!(next, l.total);
    }
}
