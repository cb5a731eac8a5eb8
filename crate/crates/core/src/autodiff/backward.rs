use super::tape::{col2im, Op, Tape, Var};
use super::tensor::numel;
use crate::scalar::Scalar;

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Tape<T> {
    /// Reverse pass from a scalar loss. Leaf gradients land in their tensor's
    /// `grad` field; earlier gradients on the tape are overwritten.
    pub fn backward(&mut self, loss: Var) {
        let ls = self.shape(loss);
        assert!(numel(ls) == 1, "contract violation: backward from non-scalar loss of shape {ls:?}");
        assert!(!self.nodes.is_empty(), "contract violation: backward on an empty tape");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.grad = Some(g);
                continue;
            }
            let contribs = self.local_grads(idx, &g);
            let fault = self.fault.is_some() && self.nodes[idx].op.kind() == self.fault;
            for (v, mut c) in contribs {
                if fault {
                    c.iter_mut().for_each(|x| *x *= T::lit(1.1));
                }
                add_into(&mut grads[v.0], c);
            }
        }
    }

    /// Gradients of node `idx`'s inputs given its output gradient `g`.
    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let out = &node.value.data;
        let mut res: Vec<(Var, Vec<T>)> = Vec::new();
        let mut emit = |v: Var, f: &mut dyn FnMut() -> Vec<T>| {
            if self.needs(v) {
                res.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (i, o) = (ws[0], ws[1]);
                let rows = g.len() / o;
                emit(*x, &mut || {
                    let mut dx = vec![T::zero(); rows * i];
                    T::gemm(rows, o, i, T::one(), g, o as isize, 1, self.data(*w), 1, o as isize, T::zero(), &mut dx, i as isize, 1);
                    dx
                });
                emit(*w, &mut || {
                    let mut dw = vec![T::zero(); i * o];
                    T::gemm(i, rows, o, T::one(), self.data(*x), 1, i as isize, g, o as isize, 1, T::zero(), &mut dw, o as isize, 1);
                    dw
                });
                if let Some(b) = b {
                    emit(*b, &mut || column_sums(g, o));
                }
            }
            Op::Conv2d { x, k, b, spec, cols } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let os = &node.value.shape;
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ks[0], ks[2], ks[3]);
                let (ho, wo) = (os[2], os[3]);
                let (ckk, hw) = (c * kh * kw, ho * wo);
                emit(*k, &mut || {
                    let mut dk = vec![T::zero(); o * ckk];
                    for bi in 0..batch {
                        T::gemm(
                            o,
                            hw,
                            ckk,
                            T::one(),
                            &g[bi * o * hw..(bi + 1) * o * hw],
                            hw as isize,
                            1,
                            &cols[bi * ckk * hw..(bi + 1) * ckk * hw],
                            1,
                            hw as isize,
                            T::one(),
                            &mut dk,
                            ckk as isize,
                            1,
                        );
                    }
                    dk
                });
                emit(*x, &mut || {
                    let mut dx = vec![T::zero(); batch * c * h * w];
                    let mut dcols = vec![T::zero(); ckk * hw];
                    for bi in 0..batch {
                        T::gemm(
                            ckk,
                            o,
                            hw,
                            T::one(),
                            self.data(*k),
                            1,
                            ckk as isize,
                            &g[bi * o * hw..(bi + 1) * o * hw],
                            hw as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            hw as isize,
                            1,
                        );
                        col2im(&dcols, (c, h, w), (kh, kw), *spec, (ho, wo), &mut dx[bi * c * h * w..(bi + 1) * c * h * w]);
                    }
                    dx
                });
                if let Some(b) = b {
                    emit(*b, &mut || {
                        let mut db = vec![T::zero(); o];
                        for bi in 0..batch {
                            for (oc, acc) in db.iter_mut().enumerate() {
                                *acc += g[(bi * o + oc) * hw..(bi * o + oc + 1) * hw].iter().copied().sum::<T>();
                            }
                        }
                        db
                    });
                }
            }
            Op::Relu(x) => emit(*x, &mut || {
                self.data(*x).iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect()
            }),
            Op::Tanh(x) => emit(*x, &mut || out.iter().zip(g).map(|(&y, &gv)| gv * (T::one() - y * y)).collect()),
            Op::Sigmoid(x) => emit(*x, &mut || out.iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect()),
            Op::Exp(x) => emit(*x, &mut || out.iter().zip(g).map(|(&y, &gv)| gv * y).collect()),
            Op::Log(x) => emit(*x, &mut || self.data(*x).iter().zip(g).map(|(&v, &gv)| gv / v).collect()),
            Op::Scale(x, c) => emit(*x, &mut || g.iter().map(|&gv| gv * *c).collect()),
            Op::AddScalar(x) => emit(*x, &mut || g.to_vec()),
            Op::Clamp { x, lo, hi } => emit(*x, &mut || {
                self.data(*x).iter().zip(g).map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { T::zero() }).collect()
            }),
            Op::Softmax { x: xv, axis } => emit(*xv, &mut || {
                let shape = &node.value.shape;
                let (outer, len, inner) = (numel(&shape[..*axis]), shape[*axis], numel(&shape[axis + 1..]));
                let mut dx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                dx
            }),
            Op::Add(a, b) => {
                emit(*a, &mut || g.to_vec());
                emit(*b, &mut || g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &mut || g.to_vec());
                emit(*b, &mut || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                emit(*a, &mut || self.data(*b).iter().zip(g).map(|(&y, &gv)| y * gv).collect());
                emit(*b, &mut || self.data(*a).iter().zip(g).map(|(&y, &gv)| y * gv).collect());
            }
            Op::Minimum(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                emit(*a, &mut || (0..g.len()).map(|i| if db[i] < da[i] { T::zero() } else { g[i] }).collect());
                emit(*b, &mut || (0..g.len()).map(|i| if db[i] < da[i] { g[i] } else { T::zero() }).collect());
            }
            Op::GaussianLogProb { x, mu, log_std } => {
                let (dx, dm, ds) = (self.data(*x), self.data(*mu), self.data(*log_std));
                let scaled = |i: usize| (dx[i] - dm[i]) / (ds[i] + ds[i]).exp();
                emit(*x, &mut || (0..g.len()).map(|i| -scaled(i) * g[i]).collect());
                emit(*mu, &mut || (0..g.len()).map(|i| scaled(i) * g[i]).collect());
                emit(*log_std, &mut || {
                    (0..g.len())
                        .map(|i| {
                            let z = (dx[i] - dm[i]) / ds[i].exp();
                            (z * z - T::one()) * g[i]
                        })
                        .collect()
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    let count = axis.map_or(numel(xs), |a| xs[a]);
                    T::one() / T::lit(count as f64)
                } else {
                    T::one()
                };
                emit(*x, &mut || match axis {
                    None => vec![g[0] * scale; numel(xs)],
                    Some(a) => {
                        let (outer, len, inner) = (numel(&xs[..*a]), xs[*a], numel(&xs[a + 1..]));
                        let mut dx = vec![T::zero(); outer * len * inner];
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    dx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        dx
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = &node.value.shape;
                let (outer, total, inner) = (numel(&shape[..*axis]), shape[*axis], numel(&shape[axis + 1..]));
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    emit(v, &mut || {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                        }
                        d
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => emit(*x, &mut || g.to_vec()),
            Op::Slice { x, axis, start } => emit(*x, &mut || {
                let xs = self.shape(*x);
                let (outer, full, inner) = (numel(&xs[..*axis]), xs[*axis], numel(&xs[axis + 1..]));
                let len = node.value.shape[*axis];
                let mut dx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    dx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                dx
            }),
            Op::GatherRows { x, rows } => emit(*x, &mut || {
                let xs = self.shape(*x);
                let width = numel(&xs[1..]);
                let mut dx = vec![T::zero(); numel(xs)];
                for (slot, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        dx[r * width + j] += g[slot * width + j];
                    }
                }
                dx
            }),
            Op::Gru { x, h, w_ih, w_hh, b_ih, b_hh, gates } => {
                let (batch, hid) = (self.shape(*h)[0], self.shape(*h)[1]);
                let inp = self.shape(*x)[1];
                let g3 = 3 * hid;
                let hd = self.data(*h);
                let mut dgi = vec![T::zero(); batch * g3];
                let mut dgh = vec![T::zero(); batch * g3];
                let mut dh_direct = vec![T::zero(); batch * hid];
                for b in 0..batch {
                    for j in 0..hid {
                        let e = b * hid + j;
                        let (r, z, n) = (gates.r[e], gates.z[e], gates.n[e]);
                        let gv = g[e];
                        let dn = gv * (T::one() - z);
                        let dz = gv * (hd[e] - n);
                        dh_direct[e] = gv * z;
                        let dan = dn * (T::one() - n * n);
                        let dr = dan * gates.gh_n[e];
                        let daz = dz * z * (T::one() - z);
                        let dar = dr * r * (T::one() - r);
                        let base = b * g3;
                        dgi[base + j] = dar;
                        dgh[base + j] = dar;
                        dgi[base + hid + j] = daz;
                        dgh[base + hid + j] = daz;
                        dgi[base + 2 * hid + j] = dan;
                        dgh[base + 2 * hid + j] = dan * r;
                    }
                }
                emit(*x, &mut || {
                    let mut dx = vec![T::zero(); batch * inp];
                    T::gemm(batch, g3, inp, T::one(), &dgi, g3 as isize, 1, self.data(*w_ih), 1, g3 as isize, T::zero(), &mut dx, inp as isize, 1);
                    dx
                });
                emit(*h, &mut || {
                    let mut dh = dh_direct.clone();
                    T::gemm(batch, g3, hid, T::one(), &dgh, g3 as isize, 1, self.data(*w_hh), 1, g3 as isize, T::one(), &mut dh, hid as isize, 1);
                    dh
                });
                emit(*w_ih, &mut || {
                    let mut dw = vec![T::zero(); inp * g3];
                    T::gemm(inp, batch, g3, T::one(), self.data(*x), 1, inp as isize, &dgi, g3 as isize, 1, T::zero(), &mut dw, g3 as isize, 1);
                    dw
                });
                emit(*w_hh, &mut || {
                    let mut dw = vec![T::zero(); hid * g3];
                    T::gemm(hid, batch, g3, T::one(), hd, 1, hid as isize, &dgh, g3 as isize, 1, T::zero(), &mut dw, g3 as isize, 1);
                    dw
                });
                emit(*b_ih, &mut || column_sums(&dgi, g3));
                emit(*b_hh, &mut || column_sums(&dgh, g3));
            }
            Op::ScatterAdd { values, plan } => {
                let channels = self.shape(*values)[1];
                emit(*values, &mut || plan.backward(g, channels));
            }
            Op::DepthOuter { alpha, context } => {
                let (sa, sc) = (self.shape(*alpha), self.shape(*context));
                let (nb, nd, nc, cells) = (sa[0], sa[1], sc[1], sa[2] * sa[3]);
                let (ad, cd) = (self.data(*alpha), self.data(*context));
                emit(*alpha, &mut || {
                    let mut da = vec![T::zero(); ad.len()];
                    for b in 0..nb {
                        for d in 0..nd {
                            for cell in 0..cells {
                                let base = ((b * nd + d) * cells + cell) * nc;
                                da[(b * nd + d) * cells + cell] =
                                    (0..nc).map(|c| g[base + c] * cd[(b * nc + c) * cells + cell]).sum();
                            }
                        }
                    }
                    da
                });
                emit(*context, &mut || {
                    let mut dc = vec![T::zero(); cd.len()];
                    for b in 0..nb {
                        for d in 0..nd {
                            for cell in 0..cells {
                                let a = ad[(b * nd + d) * cells + cell];
                                let base = ((b * nd + d) * cells + cell) * nc;
                                for c in 0..nc {
                                    dc[(b * nc + c) * cells + cell] += g[base + c] * a;
                                }
                            }
                        }
                    }
                    dc
                });
            }
            Op::Upsample2x(x) => emit(*x, &mut || {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                dx
            }),
            Op::CrossEntropy { logits, targets, weights, probs } => emit(*logits, &mut || {
                let s = self.shape(*logits);
                let (nb, k, inner) = (s[0], s[1], numel(&s[2..]));
                let norm: T = targets.iter().map(|&t| weights.as_ref().map_or(T::one(), |w| w[t])).sum();
                let mut dl = vec![T::zero(); probs.len()];
                if norm <= T::zero() {
                    return dl;
                }
                let scale = g[0] / norm;
                for b in 0..nb {
                    for i in 0..inner {
                        let t = targets[b * inner + i];
                        let wt = weights.as_ref().map_or(T::one(), |w| w[t]);
                        for c in 0..k {
                            let at = (b * k + c) * inner + i;
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[at] = (probs[at] - onehot) * wt * scale;
                        }
                    }
                }
                dl
            }),
        }
        res
    }
}

fn column_sums<T: Scalar>(g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in g.chunks(width) {
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}
