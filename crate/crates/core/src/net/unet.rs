//! U-Net forward pass with a recorded trace, and the matching reverse pass.

use super::arch::{Block, Conv, Layout, Linear, Unit};
use super::kernels::*;
use super::ScoreNet;

/// Activations needed to differentiate one unit.
struct UnitTrace {
    col: Vec<f32>,
    gn: GroupNormCache,
    normed: Vec<f32>,
    pre: Vec<f32>,
    scale: Vec<f32>,
}

struct BlockTrace {
    input: Vec<f32>,
    u1: UnitTrace,
    u2: UnitTrace,
    hw: (usize, usize),
}

/// Everything the reverse pass needs from one forward evaluation.
pub struct Trace {
    timestep: usize,
    h1: Vec<f32>,
    a1: Vec<f32>,
    h2: Vec<f32>,
    emb: Vec<f32>,
    temb: Vec<f32>,
    in_col: Vec<f32>,
    down: Vec<BlockTrace>,
    up: Vec<BlockTrace>,
    out_col: Vec<f32>,
    out_scale: f32,
    height: usize,
    width: usize,
}

impl Trace {
    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub(crate) fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Mutable view of a gradient buffer laid out like the parameters.
struct Grads<'a>(Option<&'a mut [f32]>);

impl Grads<'_> {
    fn pair(
        &mut self,
        a: usize,
        alen: usize,
        b: usize,
        blen: usize,
    ) -> Option<(&mut [f32], &mut [f32])> {
        let g = self.0.as_deref_mut()?;
        debug_assert!(a + alen <= b);
        let (lo, hi) = g.split_at_mut(b);
        Some((&mut lo[a..a + alen], &mut hi[..blen]))
    }

    fn conv(&mut self, c: &Conv) -> Option<(&mut [f32], &mut [f32])> {
        self.pair(c.w, c.cout * c.cin * c.k * c.k, c.b, c.cout)
    }

    fn linear(&mut self, l: &Linear) -> Option<(&mut [f32], &mut [f32])> {
        self.pair(l.w, l.n_in * l.n_out, l.b, l.n_out)
    }

    fn active(&self) -> bool {
        self.0.is_some()
    }
}

impl ScoreNet {
    fn slice(&self, offset: usize, len: usize) -> &[f32] {
        &self.params[offset..offset + len]
    }

    fn conv_weight(&self, c: &Conv) -> &[f32] {
        self.slice(c.w, c.cout * c.cin * c.k * c.k)
    }

    fn run_conv(&self, c: &Conv, x: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let col = if c.k == 3 {
            im2col3(x, c.cin, h, w)
        } else {
            x.to_vec()
        };
        let y = conv_forward(
            &col,
            self.conv_weight(c),
            self.slice(c.b, c.cout),
            c.cout,
            h * w,
        );
        (y, col)
    }

    fn run_linear(&self, l: &Linear, x: &[f32]) -> Vec<f32> {
        linear(
            x,
            self.slice(l.w, l.n_in * l.n_out),
            self.slice(l.b, l.n_out),
        )
    }

    fn unit_forward(
        &self,
        u: &Unit,
        x: &[f32],
        h: usize,
        w: usize,
        temb: &[f32],
    ) -> (Vec<f32>, UnitTrace) {
        let co = u.conv.cout;
        let hw = h * w;
        let (z, col) = self.run_conv(&u.conv, x, h, w);
        let (normed, gn) = group_norm_forward(
            &z,
            co,
            hw,
            self.arch.groups,
            self.slice(u.norm.gamma, co),
            self.slice(u.norm.beta, co),
        );
        let ss = self.run_linear(&u.emb, temb);
        let (scale, shift) = ss.split_at(co);
        let mut pre = normed.clone();
        for ch in 0..co {
            let (a, b) = (1.0 + scale[ch], shift[ch]);
            for v in &mut pre[ch * hw..(ch + 1) * hw] {
                *v = *v * a + b;
            }
        }
        let out = silu(&pre);
        (
            out,
            UnitTrace {
                col,
                gn,
                normed,
                pre,
                scale: scale.to_vec(),
            },
        )
    }

    fn unit_backward(
        &self,
        u: &Unit,
        t: &UnitTrace,
        dout: &[f32],
        h: usize,
        w: usize,
        temb: &[f32],
        grads: &mut Grads,
        dtemb: &mut [f32],
    ) -> Vec<f32> {
        let co = u.conv.cout;
        let hw = h * w;
        let dpre = silu_backward(&t.pre, dout);
        if grads.active() {
            let mut dss = vec![0.0f32; 2 * co];
            for ch in 0..co {
                let r = ch * hw..(ch + 1) * hw;
                dss[ch] = dpre[r.clone()]
                    .iter()
                    .zip(&t.normed[r.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                dss[co + ch] = dpre[r].iter().sum();
            }
            let d = linear_backward(
                temb,
                self.slice(u.emb.w, u.emb.n_in * u.emb.n_out),
                &dss,
                grads.linear(&u.emb),
            );
            for (a, b) in dtemb.iter_mut().zip(&d) {
                *a += b;
            }
        }
        let mut dnormed = dpre;
        for ch in 0..co {
            let a = 1.0 + t.scale[ch];
            for v in &mut dnormed[ch * hw..(ch + 1) * hw] {
                *v *= a;
            }
        }
        let norm_grads = grads.pair(u.norm.gamma, co, u.norm.beta, co);
        let dz = group_norm_backward(
            &t.gn,
            &dnormed,
            co,
            hw,
            self.slice(u.norm.gamma, co),
            norm_grads,
        );
        self.conv_input_backward(&u.conv, &t.col, &dz, h, w, grads)
    }

    fn conv_input_backward(
        &self,
        c: &Conv,
        col: &[f32],
        dy: &[f32],
        h: usize,
        w: usize,
        grads: &mut Grads,
    ) -> Vec<f32> {
        let dcol = conv_backward(
            col,
            self.conv_weight(c),
            dy,
            c.cout,
            h * w,
            grads.conv(c),
            true,
        )
        .expect("input gradient requested");
        if c.k == 3 {
            col2im3(&dcol, c.cin, h, w)
        } else {
            dcol
        }
    }

    fn block_forward(
        &self,
        b: &Block,
        x: Vec<f32>,
        h: usize,
        w: usize,
        temb: &[f32],
    ) -> (Vec<f32>, BlockTrace) {
        let (a, u1) = self.unit_forward(&b.u1, &x, h, w, temb);
        let (mut out, u2) = self.unit_forward(&b.u2, &a, h, w, temb);
        match &b.skip {
            Some(c) => {
                let (s, _) = self.run_conv(c, &x, h, w);
                out.iter_mut().zip(&s).for_each(|(o, v)| *o += v);
            }
            None => out.iter_mut().zip(&x).for_each(|(o, v)| *o += v),
        }
        (
            out,
            BlockTrace {
                input: x,
                u1,
                u2,
                hw: (h, w),
            },
        )
    }

    fn block_backward(
        &self,
        b: &Block,
        t: &BlockTrace,
        dout: &[f32],
        temb: &[f32],
        grads: &mut Grads,
        dtemb: &mut [f32],
    ) -> Vec<f32> {
        let (h, w) = t.hw;
        let da = self.unit_backward(&b.u2, &t.u2, dout, h, w, temb, grads, dtemb);
        let mut dx = self.unit_backward(&b.u1, &t.u1, &da, h, w, temb, grads, dtemb);
        let dskip = match &b.skip {
            Some(c) => self.conv_input_backward(c, &t.input, dout, h, w, grads),
            None => dout.to_vec(),
        };
        dx.iter_mut().zip(&dskip).for_each(|(a, b)| *a += b);
        dx
    }

    /// Runs the network on a `C×H×W` input, recording what the reverse pass needs.
    pub(crate) fn forward_raw(
        &self,
        x: &[f32],
        height: usize,
        width: usize,
        i: usize,
    ) -> (Vec<f32>, Trace) {
        let l: &Layout = &self.layout;
        let emb = timestep_embedding(i as f32, self.arch.temb_dim);
        let h1 = self.run_linear(&l.fc1, &emb);
        let a1 = silu(&h1);
        let h2 = self.run_linear(&l.fc2, &a1);
        let temb = silu(&h2);

        let (mut h, in_col) = self.run_conv(&l.in_conv, x, height, width);
        let levels = l.down.len();
        let mut skips = Vec::with_capacity(levels - 1);
        let mut down = Vec::with_capacity(levels);
        let (mut hh, mut ww) = (height, width);
        for (lv, b) in l.down.iter().enumerate() {
            let (out, tr) = self.block_forward(b, h, hh, ww, &temb);
            down.push(tr);
            if lv + 1 < levels {
                h = avg_pool2(&out, b.cout, hh, ww);
                skips.push(out);
                hh /= 2;
                ww /= 2;
            } else {
                h = out;
            }
        }
        let mut up = Vec::with_capacity(levels - 1);
        let mut c = l.down[levels - 1].cout;
        for b in &l.up {
            let mut cat = upsample2(&h, c, hh, ww);
            hh *= 2;
            ww *= 2;
            cat.extend_from_slice(&skips.pop().expect("one skip per level"));
            let (out, tr) = self.block_forward(b, cat, hh, ww, &temb);
            up.push(tr);
            h = out;
            c = b.cout;
        }
        let out_scale = (1.0 / self.schedule.sigma(i)) as f32;
        let (mut y, out_col) = self.run_conv(&l.out_conv, &h, height, width);
        y.iter_mut().for_each(|v| *v *= out_scale);
        let trace = Trace {
            timestep: i,
            h1,
            a1,
            h2,
            emb,
            temb,
            in_col,
            down,
            up,
            out_col,
            out_scale,
            height,
            width,
        };
        (y, trace)
    }

    /// Reverse pass: returns `cotᵀ·∂out/∂x` and, when `param_grads` is given,
    /// accumulates `cotᵀ·∂out/∂θ` into it.
    pub(crate) fn backward_raw(
        &self,
        trace: &Trace,
        cot: &[f32],
        param_grads: Option<&mut [f32]>,
    ) -> Vec<f32> {
        let l: &Layout = &self.layout;
        let mut grads = Grads(param_grads);
        let mut dtemb = vec![0.0f32; self.arch.temb_dim];
        let temb = &trace.temb;
        let (height, width) = (trace.height, trace.width);

        let dy: Vec<f32> = cot.iter().map(|v| v * trace.out_scale).collect();
        let mut dh =
            self.conv_input_backward(&l.out_conv, &trace.out_col, &dy, height, width, &mut grads);

        let levels = l.down.len();
        let mut dskips: Vec<Vec<f32>> = Vec::with_capacity(levels - 1);
        for (b, t) in l.up.iter().zip(&trace.up).rev() {
            let dcat = self.block_backward(b, t, &dh, temb, &mut grads, &mut dtemb);
            let (hh, ww) = t.hw;
            let c_low = b.cin - b.cout;
            let (dup, dskip) = dcat.split_at(c_low * hh * ww);
            dskips.push(dskip.to_vec());
            dh = upsample2_backward(dup, c_low, hh / 2, ww / 2);
        }
        for (lv, (b, t)) in l.down.iter().zip(&trace.down).enumerate().rev() {
            if lv + 1 < levels {
                let (hh, ww) = t.hw;
                let mut d = avg_pool2_backward(&dh, b.cout, hh, ww);
                let ds = dskips.pop().expect("one skip per level");
                d.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
                dh = d;
            }
            dh = self.block_backward(b, t, &dh, temb, &mut grads, &mut dtemb);
        }
        let dx =
            self.conv_input_backward(&l.in_conv, &trace.in_col, &dh, height, width, &mut grads);

        if grads.active() {
            let dh2 = silu_backward(&trace.h2, &dtemb);
            let da1 = linear_backward(
                &trace.a1,
                self.slice(l.fc2.w, l.fc2.n_in * l.fc2.n_out),
                &dh2,
                grads.linear(&l.fc2),
            );
            let dh1 = silu_backward(&trace.h1, &da1);
            linear_backward(
                &trace.emb,
                self.slice(l.fc1.w, l.fc1.n_in * l.fc1.n_out),
                &dh1,
                grads.linear(&l.fc1),
            );
        }
        dx
    }
}
