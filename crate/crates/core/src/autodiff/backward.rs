use super::kernels::{gelu_grad, gemm, Strided};
use super::ops::rotate;
use super::{Graph, Op, Var};

fn axpy(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if let Some(d) = self.adj_mut(adj, v) {
            axpy(d, g);
        }
    }

    /// Propagates the adjoint `g` of node `i` into its inputs.
    pub(crate) fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let prec = self.precision();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).rows_cols();
                let n = self.value(*b).rows_cols().1;
                if let Some(da) = self.adj_mut(adj, *a) {
                    gemm(prec, m, n, k, 1.0, Strided::rows(g, n), Strided::transposed(self.data(*b), n), 1.0, da, k, 1);
                }
                if let Some(db) = self.adj_mut(adj, *b) {
                    gemm(prec, k, m, n, 1.0, Strided::transposed(self.data(*a), k), Strided::rows(g, n), 1.0, db, n, 1);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).rows_cols();
                if let Some(da) = self.adj_mut(adj, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Reshape { a } | Op::AddScalar { a } => self.accumulate(adj, *a, g),
            Op::Add { a, b } => {
                self.accumulate(adj, *a, g);
                self.accumulate(adj, *b, g);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(adj, *a, g);
                let cols = self.value(*bias).numel();
                if let Some(db) = self.adj_mut(adj, *bias) {
                    for row in g.chunks(cols) {
                        axpy(db, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(da) = self.adj_mut(adj, *a) {
                    for k in 0..g.len() {
                        da[k] += g[k] * bv[k];
                    }
                }
                if let Some(db) = self.adj_mut(adj, *b) {
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = self.adj_mut(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::Gelu { a } => {
                let av = self.data(*a);
                if let Some(da) = self.adj_mut(adj, *a) {
                    for k in 0..g.len() {
                        da[k] += g[k] * gelu_grad(av[k]);
                    }
                }
            }
            Op::Softmax { a } => {
                let (_, cols) = out.rows_cols();
                if let Some(da) = self.adj_mut(adj, *a) {
                    for (r, (y, gr)) in out.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            da[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, xhat, rstd } => {
                let (rows, cols) = out.rows_cols();
                let gv = self.data(*gain);
                let shared = gv.len() == 1;
                if let Some(dg) = self.adj_mut(adj, *gain) {
                    for k in 0..g.len() {
                        let slot = if shared { 0 } else { k % cols };
                        dg[slot] += g[k] * xhat[k];
                    }
                }
                if let Some(dx) = self.adj_mut(adj, *x) {
                    let mut dh = vec![0.0; cols];
                    for r in 0..rows {
                        let base = r * cols;
                        for c in 0..cols {
                            dh[c] = g[base + c] * if shared { gv[0] } else { gv[c] };
                        }
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dhx = dh.iter().zip(&xhat[base..base + cols]).map(|(a, b)| a * b).sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            dx[base + c] += rstd[r] * (dh[c] - mean_dh - xhat[base + c] * mean_dhx);
                        }
                    }
                }
            }
            Op::CausalConv { x, kernel, seq_len } => {
                let (rows, ch) = out.rows_cols();
                let width = self.value(*kernel).rows_cols().0;
                let (xv, kv) = (self.data(*x), self.data(*kernel));
                if let Some(dx) = self.adj_mut(adj, *x) {
                    for t in 0..rows {
                        for s in 0..width.min(t % seq_len + 1) {
                            for c in 0..ch {
                                dx[(t - s) * ch + c] += g[t * ch + c] * kv[s * ch + c];
                            }
                        }
                    }
                }
                if let Some(dk) = self.adj_mut(adj, *kernel) {
                    for t in 0..rows {
                        for s in 0..width.min(t % seq_len + 1) {
                            for c in 0..ch {
                                dk[s * ch + c] += g[t * ch + c] * xv[(t - s) * ch + c];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = out.rows_cols().1;
                if let Some(dx) = self.adj_mut(adj, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut dx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ScatterAddRows { src, idx } => {
                let cols = out.rows_cols().1;
                if let Some(ds) = self.adj_mut(adj, *src) {
                    for (r, &dst) in idx.iter().enumerate() {
                        axpy(&mut ds[r * cols..(r + 1) * cols], &g[dst * cols..(dst + 1) * cols]);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let cols = out.rows_cols().1;
                if let Some(da) = self.adj_mut(adj, *a) {
                    axpy(&mut da[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.accumulate(adj, *p, &g[at..at + len]);
                    at += len;
                }
            }
            Op::ScaleRows { x, s } => {
                let cols = out.rows_cols().1;
                let (xv, sv) = (self.data(*x), self.data(*s));
                if let Some(dx) = self.adj_mut(adj, *x) {
                    for k in 0..g.len() {
                        dx[k] += g[k] * sv[k / cols];
                    }
                }
                if let Some(ds) = self.adj_mut(adj, *s) {
                    for k in 0..g.len() {
                        ds[k / cols] += g[k] * xv[k];
                    }
                }
            }
            Op::SumRows { a } => {
                let cols = g.len();
                if let Some(da) = self.adj_mut(adj, *a) {
                    for row in da.chunks_mut(cols) {
                        axpy(row, g);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.adj_mut(adj, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(da) = self.adj_mut(adj, *a) {
                    let w = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += w);
                }
            }
            Op::TopM { a, idx } => {
                if let Some(da) = self.adj_mut(adj, *a) {
                    for (k, &src) in idx.iter().enumerate() {
                        da[src] += g[k];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let vocab = probs.len() / rows;
                let w = g[0] / rows as f64;
                if let Some(dl) = self.adj_mut(adj, *logits) {
                    for (k, p) in probs.iter().enumerate() {
                        dl[k] += w * p;
                    }
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * vocab + t] -= w;
                    }
                }
            }
            Op::Rope { a, seq_len, heads } => {
                let (rows, cols) = out.rows_cols();
                let mut back = g.to_vec();
                rotate(&mut back, rows, cols, *seq_len, *heads, -1.0);
                self.accumulate(adj, *a, &back);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.attention_backward(g, adj, [*q, *k, *v], *seq_len, *heads, probs),
            Op::Dropout { a, mask } => {
                if let Some(da) = self.adj_mut(adj, *a) {
                    for k in 0..g.len() {
                        da[k] += g[k] * mask[k];
                    }
                }
            }
            Op::RankScores { q, keys, rank } => {
                let (t, dk) = self.value(*q).rows_cols();
                let n = self.value(*keys).rows_cols().0;
                let w = dk / rank;
                let cols = rank * n;
                for a in 0..*rank {
                    let ga = Strided::rows(g, cols).offset(a * n);
                    if let Some(dq) = self.adj_mut(adj, *q) {
                        gemm(prec, t, n, w, 1.0, ga, Strided::rows(self.data(*keys), dk).offset(a * w), 1.0, &mut dq[a * w..], dk, 1);
                    }
                    if let Some(dkeys) = self.adj_mut(adj, *keys) {
                        let gt = Strided::transposed(g, cols).offset(a * n);
                        gemm(prec, n, t, w, 1.0, gt, Strided::rows(self.data(*q), dk).offset(a * w), 1.0, &mut dkeys[a * w..], dk, 1);
                    }
                }
            }
            Op::BilinearCells {
                row,
                col,
                core,
                rank,
                side,
                cells,
            } => {
                let r = *rank;
                let width = r * side;
                let m = g.len() / (self.value(*row).numel() / width);
                let (rd, cd, c) = (self.data(*row), self.data(*col), self.data(*core));
                let rv = |tok: usize, a: usize, i: usize| rd[tok * width + a * side + i];
                let cv = |tok: usize, b: usize, j: usize| cd[tok * width + b * side + j];
                if let Some(dc) = self.adj_mut(adj, *core) {
                    for (k, &(i, j)) in cells.iter().enumerate() {
                        let tok = k / m;
                        for a in 0..r {
                            for b in 0..r {
                                dc[a * r + b] += g[k] * rv(tok, a, i) * cv(tok, b, j);
                            }
                        }
                    }
                }
                if let Some(dr) = self.adj_mut(adj, *row) {
                    for (k, &(i, j)) in cells.iter().enumerate() {
                        let tok = k / m;
                        for a in 0..r {
                            let inner: f64 = (0..r).map(|b| c[a * r + b] * cv(tok, b, j)).sum();
                            dr[tok * width + a * side + i] += g[k] * inner;
                        }
                    }
                }
                if let Some(dcol) = self.adj_mut(adj, *col) {
                    for (k, &(i, j)) in cells.iter().enumerate() {
                        let tok = k / m;
                        for b in 0..r {
                            let inner: f64 = (0..r).map(|a| rv(tok, a, i) * c[a * r + b]).sum();
                            dcol[tok * width + b * side + j] += g[k] * inner;
                        }
                    }
                }
            }
            Op::AdditiveCells { row, col, side, cells } => {
                let m = g.len() / (self.value(*row).numel() / side);
                for (var, pick_row) in [(*row, true), (*col, false)] {
                    if let Some(d) = self.adj_mut(adj, var) {
                        for (k, &(i, j)) in cells.iter().enumerate() {
                            let at = if pick_row { i } else { j };
                            d[(k / m) * side + at] += g[k];
                        }
                    }
                }
            }
            Op::BlockPool {
                scores,
                values,
                slots,
                blocks,
            } => {
                let h = scores.len();
                let dv = self.value(*values).rows_cols().1;
                let chunk = dv / h;
                let width = blocks * dv;
                let m = self.value(scores[0]).rows_cols().1;
                let vd = self.data(*values);
                for (c, s) in scores.iter().enumerate() {
                    if let Some(ds) = self.adj_mut(adj, *s) {
                        for (k, &(phys, p)) in slots.iter().enumerate() {
                            let base = (k / m) * width + p * dv + c * chunk;
                            let gr = &g[base..base + chunk];
                            let vr = &vd[phys * dv + c * chunk..phys * dv + (c + 1) * chunk];
                            ds[k] += gr.iter().zip(vr).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let weights: Vec<&[f64]> = scores.iter().map(|s| self.data(*s)).collect();
                if let Some(dvals) = self.adj_mut(adj, *values) {
                    for (k, &(phys, p)) in slots.iter().enumerate() {
                        let base = (k / m) * width + p * dv;
                        for (c, w) in weights.iter().enumerate() {
                            let lo = c * chunk;
                            for x in lo..lo + chunk {
                                dvals[phys * dv + x] += w[k] * g[base + x];
                            }
                        }
                    }
                }
            }
            Op::AuxLoss { core, dcore } => {
                if let Some(dc) = self.adj_mut(adj, *core) {
                    for (d, x) in dc.iter_mut().zip(dcore) {
                        *d += g[0] * x;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        [q, k, v]: [Var; 3],
        seq_len: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let prec = self.precision();
        let (rows, cols) = self.value(q).rows_cols();
        let dh = cols / heads;
        let batch = rows / seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; rows * cols];
        let mut dk = vec![0.0; rows * cols];
        let mut dvv = vec![0.0; rows * cols];
        let mut dp = vec![0.0; seq_len * seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq_len * cols + h * dh;
                let p = &probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                let go = Strided::rows(g, cols).offset(base);
                // dV = P^T dO
                gemm(prec, seq_len, seq_len, dh, 1.0, Strided::transposed(p, seq_len), go, 0.0, &mut dvv[base..], cols, 1);
                // dP = dO V^T
                gemm(prec, seq_len, dh, seq_len, 1.0, go, Strided::transposed(vd, cols).offset(base), 0.0, &mut dp, seq_len, 1);
                for i in 0..seq_len {
                    let pr = &p[i * seq_len..(i + 1) * seq_len];
                    let dr = &mut dp[i * seq_len..(i + 1) * seq_len];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..seq_len {
                        dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
                    }
                }
                gemm(prec, seq_len, seq_len, dh, 1.0, Strided::rows(&dp, seq_len), Strided::rows(kd, cols).offset(base), 0.0, &mut dq[base..], cols, 1);
                gemm(prec, seq_len, seq_len, dh, 1.0, Strided::transposed(&dp, seq_len), Strided::rows(qd, cols).offset(base), 0.0, &mut dk[base..], cols, 1);
            }
        }
        self.accumulate(adj, q, &dq);
        self.accumulate(adj, k, &dk);
        self.accumulate(adj, v, &dvv);
    }
}
