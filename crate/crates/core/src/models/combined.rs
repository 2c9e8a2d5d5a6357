use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{head, head_backward, scale, ModelError, SegmentOutput, SeqNet, StepInput, Task};
use crate::nn::{
    relu, relu_backward, visit_prefixed, visit_prefixed_mut, Conv2d, Gru, GruCache, Linear, Params,
};

/// Layer sizes of the global+spatial network.
///
/// The spatial tensor goes through convolutions A and B, the global vector
/// through linear C; both are concatenated into linear D, then GRU E and
/// linear F. ReLU follows A, B, C and D. Convolutions are 3×3, stride 2,
/// zero padding 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedNetConfig {
    pub global_dim: usize,
    pub spatial_shape: [usize; 3],
    pub conv_a: usize,
    pub conv_b: usize,
    pub c: usize,
    pub d: usize,
    pub e: usize,
    pub n_out: usize,
}

pub const KERNEL: [usize; 2] = [3, 3];
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

impl CombinedNetConfig {
    pub const FULL: [usize; 5] = [16, 32, 128, 512, 128];

    pub fn new(
        task: Task,
        global_dim: usize,
        spatial_shape: [usize; 3],
        n_a: usize,
        width: f64,
    ) -> Self {
        let [conv_a, conv_b, c, d, e] = Self::FULL.map(|s| scale(s, width));
        let n_out = match task {
            Task::Gse => 1,
            Task::Bop => n_a,
        };
        CombinedNetConfig {
            global_dim,
            spatial_shape,
            conv_a,
            conv_b,
            c,
            d,
            e,
            n_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedNet {
    pub task: Task,
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub c: Linear,
    pub d: Linear,
    pub e: Gru,
    pub f: Linear,
}

#[derive(Debug, Clone)]
pub struct CombinedCache {
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone)]
struct StepCache {
    s: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    g: Array2<f64>,
    c: Array2<f64>,
    cat: Array2<f64>,
    d: Array2<f64>,
    e: GruCache,
    he: Array2<f64>,
}

impl CombinedNet {
    pub fn new(
        cfg: &CombinedNetConfig,
        task: Task,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let conv_a = Conv2d::new(cfg.spatial_shape, cfg.conv_a, KERNEL, STRIDE, PAD, rng)?;
        let [_, h, w] = conv_a.out_shape();
        let conv_b = Conv2d::new([cfg.conv_a, h, w], cfg.conv_b, KERNEL, STRIDE, PAD, rng)?;
        let c = Linear::new(cfg.global_dim, cfg.c, rng);
        let d = Linear::new(conv_b.out_len() + cfg.c, cfg.d, rng);
        let e = Gru::new(cfg.d, cfg.e, rng);
        let f = Linear::new(cfg.e, cfg.n_out, rng);
        Ok(CombinedNet {
            task,
            conv_a,
            conv_b,
            c,
            d,
            e,
            f,
        })
    }

    pub fn zeros(cfg: &CombinedNetConfig, task: Task) -> Result<Self, ModelError> {
        let conv_a = Conv2d::zeros(cfg.spatial_shape, cfg.conv_a, KERNEL, STRIDE, PAD)?;
        let [_, h, w] = conv_a.out_shape();
        let conv_b = Conv2d::zeros([cfg.conv_a, h, w], cfg.conv_b, KERNEL, STRIDE, PAD)?;
        let d = Linear::zeros(conv_b.out_len() + cfg.c, cfg.d);
        Ok(CombinedNet {
            task,
            conv_a,
            conv_b,
            c: Linear::zeros(cfg.global_dim, cfg.c),
            d,
            e: Gru::zeros(cfg.d, cfg.e),
            f: Linear::zeros(cfg.e, cfg.n_out),
        })
    }

    pub fn config(&self) -> CombinedNetConfig {
        CombinedNetConfig {
            global_dim: self.c.n_in(),
            spatial_shape: self.conv_a.in_shape,
            conv_a: self.conv_a.out_channels(),
            conv_b: self.conv_b.out_channels(),
            c: self.c.n_out(),
            d: self.d.n_out(),
            e: self.e.hidden(),
            n_out: self.f.n_out(),
        }
    }

    pub(crate) fn backward_cache(
        &self,
        cache: &CombinedCache,
        probs: &[Array2<f64>],
        dprobs: &[Array2<f64>],
    ) -> Self {
        let mut g = self.zeros_like();
        let batch = probs.first().map_or(0, |p| p.nrows());
        let mut carry = Array2::zeros((batch, self.e.hidden()));
        let nb = self.conv_b.out_len();
        for (t, st) in cache.steps.iter().enumerate().rev() {
            let dlogits = head_backward(self.task, &probs[t], &dprobs[t]);
            self.f.backward_params(&st.he, &dlogits, &mut g.f);
            let dhe = self.f.backward_input(&dlogits) + &carry;
            let (dx_e, dh) = self.e.backward(&st.e, &dhe, &mut g.e);
            carry = dh;
            let dd = relu_backward(&st.d, &dx_e);
            self.d.backward_params(&st.cat, &dd, &mut g.d);
            let dcat = self.d.backward_input(&dd);
            let dc = relu_backward(&st.c, &dcat.slice(s![.., nb..]).to_owned());
            self.c.backward_params(&st.g, &dc, &mut g.c);
            let db = relu_backward(&st.b, &dcat.slice(s![.., ..nb]).to_owned());
            let da = self
                .conv_b
                .backward(&st.a, &db, &mut g.conv_b, true)
                .expect("dx requested");
            let da = relu_backward(&st.a, &da);
            self.conv_a.backward(&st.s, &da, &mut g.conv_a, false);
        }
        g
    }
}

impl Params for CombinedNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_prefixed("conv_a", &self.conv_a, f);
        visit_prefixed("conv_b", &self.conv_b, f);
        visit_prefixed("c", &self.c, f);
        visit_prefixed("d", &self.d, f);
        visit_prefixed("e", &self.e, f);
        visit_prefixed("f", &self.f, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_prefixed_mut("conv_a", &mut self.conv_a, f);
        visit_prefixed_mut("conv_b", &mut self.conv_b, f);
        visit_prefixed_mut("c", &mut self.c, f);
        visit_prefixed_mut("d", &mut self.d, f);
        visit_prefixed_mut("e", &mut self.e, f);
        visit_prefixed_mut("f", &mut self.f, f);
    }
}

impl SeqNet for CombinedNet {
    type Cache = CombinedCache;

    fn task(&self) -> Task {
        self.task
    }

    fn n_out(&self) -> usize {
        self.f.n_out()
    }

    fn zeros_like(&self) -> Self {
        CombinedNet {
            task: self.task,
            conv_a: self.conv_a.zeros_like(),
            conv_b: self.conv_b.zeros_like(),
            c: self.c.zeros_like(),
            d: self.d.zeros_like(),
            e: self.e.zeros_like(),
            f: self.f.zeros_like(),
        }
    }

    fn init_state(&self, batch: usize) -> Vec<Array2<f64>> {
        vec![Array2::zeros((batch, self.e.hidden()))]
    }

    fn forward(
        &self,
        steps: &[StepInput],
        state: &[Array2<f64>],
    ) -> Result<SegmentOutput<CombinedCache>, ModelError> {
        if state.len() != 1 {
            return Err(ModelError::Length {
                what: "hidden state tensors",
                got: state.len(),
                expected: 1,
            });
        }
        let mut h = state[0].clone();
        let mut probs = Vec::with_capacity(steps.len());
        let mut cache = Vec::with_capacity(steps.len());
        for step in steps {
            let sp = step.spatial.as_ref().ok_or(ModelError::MissingSpatial)?;
            if sp.nrows() != step.global.nrows() {
                return Err(ModelError::Length {
                    what: "spatial batch rows",
                    got: sp.nrows(),
                    expected: step.global.nrows(),
                });
            }
            let a = relu(&self.conv_a.forward(sp)?);
            let b = relu(&self.conv_b.forward(&a)?);
            let c = relu(&self.c.forward(&step.global)?);
            let cat = concatenate![Axis(1), b, c];
            let d = relu(&self.d.forward(&cat)?);
            let (h_next, e) = self.e.forward(&d, &h)?;
            probs.push(head(self.task, &self.f.forward(&h_next)?));
            h = h_next;
            cache.push(StepCache {
                s: sp.clone(),
                a,
                b,
                g: step.global.clone(),
                c,
                cat,
                d,
                e,
                he: h.clone(),
            });
        }
        Ok(SegmentOutput {
            probs,
            state: vec![h],
            cache: CombinedCache { steps: cache },
        })
    }

    fn backward(&self, out: &SegmentOutput<CombinedCache>, dprobs: &[Array2<f64>]) -> Self {
        self.backward_cache(&out.cache, &out.probs, dprobs)
    }
}

/// Per-step task output for one sequence of aligned global vectors and
/// spatial tensors, from a fresh hidden state.
pub fn combined_forward(
    net: &CombinedNet,
    global: &[Vec<f64>],
    spatial: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, ModelError> {
    if global.len() != spatial.len() {
        return Err(ModelError::Length {
            what: "spatial sequence length",
            got: spatial.len(),
            expected: global.len(),
        });
    }
    let (gd, sd) = (net.c.n_in(), net.conv_a.in_len());
    let mut steps = Vec::with_capacity(global.len());
    for (g, s) in global.iter().zip(spatial) {
        if g.len() != gd {
            return Err(ModelError::Length {
                what: "global feature length",
                got: g.len(),
                expected: gd,
            });
        }
        if s.len() != sd {
            return Err(ModelError::Length {
                what: "spatial tensor length",
                got: s.len(),
                expected: sd,
            });
        }
        steps.push(StepInput {
            global: Array2::from_shape_vec((1, gd), g.clone()).expect("1×dim"),
            spatial: Some(Array2::from_shape_vec((1, sd), s.clone()).expect("1×dim")),
        });
    }
    let out = net.forward(&steps, &net.init_state(1))?;
    Ok(out
        .probs
        .into_iter()
        .map(|p| p.into_raw_vec_and_offset().0)
        .collect())
}
