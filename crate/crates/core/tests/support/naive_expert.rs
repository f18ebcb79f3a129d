//! Straight-line reference implementation of the expert forward pass,
//! written against tensor names only.

use actkit::expert::{ContextKV, ExpertConfig, ExpertWeights};

pub const H: usize = 30;
pub const A: usize = 32;

pub struct Naive<'a> {
    pub w: &'a ExpertWeights,
    pub cfg: ExpertConfig,
}

impl Naive<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.w.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    /// `x` is `n x in`; returns `n x out`.
    fn linear(&self, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = self.t(&format!("{name}.weight"));
        let b = self.t(&format!("{name}.bias"));
        let out = b.len();
        let inp = w.len() / out;
        x.iter()
            .map(|row| {
                let mut y = vec![0.0; out];
                for o in 0..out {
                    let mut acc = 0.0;
                    for i in 0..inp {
                        acc += w[o * inp + i] * row[i];
                    }
                    y[o] = acc + b[o];
                }
                y
            })
            .collect()
    }

    fn rms(v: &[f64]) -> Vec<f64> {
        let mut ss = 0.0;
        for x in v {
            ss += x * x;
        }
        let r = (ss / v.len() as f64 + 1e-6).sqrt();
        v.iter().map(|x| x / r).collect()
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    fn modulate(x: &[Vec<f64>], shift: &[f64], scale: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = Self::rms(row);
                (0..row.len()).map(|c| n[c] * (1.0 + scale[c]) + shift[c]).collect()
            })
            .collect()
    }

    fn split_heads(&self, x: &[Vec<f64>], gain: &[f64], rotate: bool) -> Vec<Vec<Vec<f64>>> {
        let dh = self.cfg.width / self.cfg.heads;
        (0..self.cfg.heads)
            .map(|h| {
                x.iter()
                    .enumerate()
                    .map(|(pos, row)| {
                        let seg = &row[h * dh..(h + 1) * dh];
                        let n = Self::rms(seg);
                        let mut v: Vec<f64> = (0..dh).map(|i| n[i] * gain[i]).collect();
                        if rotate {
                            let half = dh / 2;
                            let orig = v.clone();
                            for i in 0..half {
                                let freq = 1.0 / self.cfg.rotary_base.powf((2 * i) as f64 / dh as f64);
                                let ang = pos as f64 * freq;
                                v[i] = orig[i] * ang.cos() - orig[i + half] * ang.sin();
                                v[i + half] = orig[i + half] * ang.cos() + orig[i] * ang.sin();
                            }
                        }
                        v
                    })
                    .collect()
            })
            .collect()
    }

    fn attention(
        &self,
        q: &[Vec<Vec<f64>>],
        k: &[Vec<Vec<f64>>],
        v: &[Vec<f64>],
        mask: &[bool],
    ) -> Vec<Vec<f64>> {
        let dh = self.cfg.width / self.cfg.heads;
        let n = q[0].len();
        let mut out = vec![vec![0.0; self.cfg.width]; n];
        for h in 0..self.cfg.heads {
            for i in 0..n {
                let mut logits = Vec::new();
                for j in 0..k[h].len() {
                    if !mask[j] {
                        continue;
                    }
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q[h][i][c] * k[h][j][c];
                    }
                    logits.push((j, dot / (dh as f64).sqrt()));
                }
                let m = logits.iter().map(|l| l.1).fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
                for &(j, l) in &logits {
                    let p = (l - m).exp() / z;
                    for c in 0..dh {
                        out[i][h * dh + c] += p * v[j][h * dh + c];
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &[f64], t: f64, ctx: &ContextKV) -> Vec<f64> {
        let w = self.cfg.width;
        let rows: Vec<Vec<f64>> = x.chunks(A).map(|r| r.to_vec()).collect();
        let mut h = self.linear("input", &rows);

        let half = self.cfg.time_dim / 2;
        let mut feats = vec![0.0; self.cfg.time_dim];
        for k in 0..half {
            let f = (10_000f64).powf(-(k as f64) / half as f64);
            feats[k] = (1000.0 * t * f).sin();
            feats[k + half] = (1000.0 * t * f).cos();
        }
        let hid: Vec<f64> = self.linear("time.fc1", &[feats])[0].iter().map(|&v| Self::silu(v)).collect();
        let temb = self.linear("time.fc2", &[hid]).remove(0);
        let act: Vec<f64> = temb.iter().map(|&v| Self::silu(v)).collect();

        for l in 0..self.cfg.layers {
            let p = format!("layers.{l}");
            let m = self.linear(&format!("{p}.modulation"), &[act.clone()]).remove(0);
            let chunk = |i: usize| &m[i * w..(i + 1) * w];

            let a = Self::modulate(&h, chunk(0), chunk(1));
            let q = self.split_heads(&self.linear(&format!("{p}.sa.q"), &a), self.t(&format!("{p}.sa.q_norm")), true);
            let k = self.split_heads(&self.linear(&format!("{p}.sa.k"), &a), self.t(&format!("{p}.sa.k_norm")), true);
            let v = self.linear(&format!("{p}.sa.v"), &a);
            let o = self.linear(&format!("{p}.sa.o"), &self.attention(&q, &k, &v, &vec![true; H]));
            for i in 0..H {
                for c in 0..w {
                    h[i][c] += chunk(2)[c] * o[i][c];
                }
            }

            let n = ctx.tokens();
            let keys: Vec<Vec<f64>> = (0..n).map(|j| ctx.keys(l).row(j).to_vec()).collect();
            let vals: Vec<Vec<f64>> = (0..n).map(|j| ctx.values(l).row(j).to_vec()).collect();
            let gw = self.t(&format!("{p}.depth_gate.w"));
            let gb = self.t(&format!("{p}.depth_gate.bias"))[0];
            let mut c_mean = vec![0.0; gw.len()];
            let mut count = 0.0;
            for j in 0..n {
                let a_t = if ctx.valid()[j] { 1.0 } else { 0.0 };
                let m_t = if ctx.depth()[j] { 1.0 } else { 0.0 };
                for d in 0..gw.len() {
                    c_mean[d] += a_t * (1.0 - m_t) * vals[j][d];
                }
                count += a_t * (1.0 - m_t);
            }
            let logit: f64 = gb + (0..gw.len()).map(|d| gw[d] * c_mean[d] / count).sum::<f64>();
            let g = 1.0 / (1.0 + (-logit).exp());
            let scale_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
                rows.iter()
                    .enumerate()
                    .map(|(j, r)| {
                        let m_t = if ctx.depth()[j] { 1.0 } else { 0.0 };
                        r.iter().map(|x| x * (1.0 - m_t + m_t * g)).collect()
                    })
                    .collect()
            };
            let kt = self.linear(&format!("{p}.adapters.p_k"), &scale_rows(&keys));
            let vt = self.linear(&format!("{p}.adapters.p_v"), &scale_rows(&vals));

            let a = Self::modulate(&h, chunk(3), chunk(4));
            let q = self.split_heads(&self.linear(&format!("{p}.ca.q"), &a), self.t(&format!("{p}.ca.q_norm")), false);
            let k = self.split_heads(&kt, self.t(&format!("{p}.ca.k_norm")), false);
            let o = self.linear(&format!("{p}.ca.o"), &self.attention(&q, &k, &vt, ctx.valid()));
            for i in 0..H {
                for c in 0..w {
                    h[i][c] += chunk(5)[c] * o[i][c];
                }
            }

            let a = Self::modulate(&h, chunk(6), chunk(7));
            let gate = self.linear(&format!("{p}.mlp.gate"), &a);
            let up = self.linear(&format!("{p}.mlp.up"), &a);
            let inner: Vec<Vec<f64>> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g.iter().zip(u).map(|(g, u)| Self::silu(*g) * u).collect())
                .collect();
            let o = self.linear(&format!("{p}.mlp.down"), &inner);
            for i in 0..H {
                for c in 0..w {
                    h[i][c] += chunk(8)[c] * o[i][c];
                }
            }
        }

        let fm = self.linear("final.modulation", &[act]).remove(0);
        let normed = Self::modulate(&h, &fm[..w], &fm[w..]);
        self.linear("output", &normed).concat()
    }
}
