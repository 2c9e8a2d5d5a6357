use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{head, head_backward, scale, ModelError, SegmentOutput, SeqNet, StepInput, Task};
use crate::nn::{
    relu, relu_backward, visit_prefixed, visit_prefixed_mut, Gru, GruCache, Linear, Params,
};

/// Layer sizes of the global-feature network: linear A and B with ReLU,
/// GRUs C and D, linear E into the task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalNetConfig {
    pub input_dim: usize,
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub n_out: usize,
}

impl GlobalNetConfig {
    pub const FULL: [usize; 4] = [1024, 2048, 2048, 512];

    /// Full-size layers scaled by `width`; `n_out` is 1 for GSE and `n_a`
    /// for BOP.
    pub fn new(task: Task, input_dim: usize, n_a: usize, width: f64) -> Self {
        let [a, b, c, d] = Self::FULL.map(|s| scale(s, width));
        let n_out = match task {
            Task::Gse => 1,
            Task::Bop => n_a,
        };
        GlobalNetConfig {
            input_dim,
            a,
            b,
            c,
            d,
            n_out,
        }
    }

    pub fn sized(input_dim: usize, [a, b, c, d]: [usize; 4], n_out: usize) -> Self {
        GlobalNetConfig {
            input_dim,
            a,
            b,
            c,
            d,
            n_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalNet {
    pub task: Task,
    pub a: Linear,
    pub b: Linear,
    pub c: Gru,
    pub d: Gru,
    pub e: Linear,
}

#[derive(Debug, Clone)]
pub struct GlobalCache {
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    c: GruCache,
    d: GruCache,
    hd: Array2<f64>,
}

impl GlobalNet {
    pub fn new(cfg: &GlobalNetConfig, task: Task, rng: &mut impl Rng) -> Self {
        GlobalNet {
            task,
            a: Linear::new(cfg.input_dim, cfg.a, rng),
            b: Linear::new(cfg.a, cfg.b, rng),
            c: Gru::new(cfg.b, cfg.c, rng),
            d: Gru::new(cfg.c, cfg.d, rng),
            e: Linear::new(cfg.d, cfg.n_out, rng),
        }
    }

    pub fn zeros(cfg: &GlobalNetConfig, task: Task) -> Self {
        GlobalNet {
            task,
            a: Linear::zeros(cfg.input_dim, cfg.a),
            b: Linear::zeros(cfg.a, cfg.b),
            c: Gru::zeros(cfg.b, cfg.c),
            d: Gru::zeros(cfg.c, cfg.d),
            e: Linear::zeros(cfg.d, cfg.n_out),
        }
    }

    pub fn config(&self) -> GlobalNetConfig {
        GlobalNetConfig {
            input_dim: self.a.n_in(),
            a: self.a.n_out(),
            b: self.b.n_out(),
            c: self.c.hidden(),
            d: self.d.hidden(),
            n_out: self.e.n_out(),
        }
    }

    pub(crate) fn backward_cache(
        &self,
        cache: &GlobalCache,
        probs: &[Array2<f64>],
        dprobs: &[Array2<f64>],
    ) -> Self {
        let mut g = self.zeros_like();
        let batch = probs.first().map_or(0, |p| p.nrows());
        let mut carry_c = Array2::zeros((batch, self.c.hidden()));
        let mut carry_d = Array2::zeros((batch, self.d.hidden()));
        for (t, s) in cache.steps.iter().enumerate().rev() {
            let dlogits = head_backward(self.task, &probs[t], &dprobs[t]);
            self.e.backward_params(&s.hd, &dlogits, &mut g.e);
            let dhd = self.e.backward_input(&dlogits) + &carry_d;
            let (dx_d, dh_d) = self.d.backward(&s.d, &dhd, &mut g.d);
            carry_d = dh_d;
            let dhc = dx_d + &carry_c;
            let (dx_c, dh_c) = self.c.backward(&s.c, &dhc, &mut g.c);
            carry_c = dh_c;
            let db = relu_backward(&s.b, &dx_c);
            self.b.backward_params(&s.a, &db, &mut g.b);
            let da = relu_backward(&s.a, &self.b.backward_input(&db));
            self.a.backward_params(&s.x, &da, &mut g.a);
        }
        g
    }
}

impl Params for GlobalNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_prefixed("a", &self.a, f);
        visit_prefixed("b", &self.b, f);
        visit_prefixed("c", &self.c, f);
        visit_prefixed("d", &self.d, f);
        visit_prefixed("e", &self.e, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_prefixed_mut("a", &mut self.a, f);
        visit_prefixed_mut("b", &mut self.b, f);
        visit_prefixed_mut("c", &mut self.c, f);
        visit_prefixed_mut("d", &mut self.d, f);
        visit_prefixed_mut("e", &mut self.e, f);
    }
}

impl SeqNet for GlobalNet {
    type Cache = GlobalCache;

    fn task(&self) -> Task {
        self.task
    }

    fn n_out(&self) -> usize {
        self.e.n_out()
    }

    fn zeros_like(&self) -> Self {
        GlobalNet::zeros(&self.config(), self.task)
    }

    fn init_state(&self, batch: usize) -> Vec<Array2<f64>> {
        vec![
            Array2::zeros((batch, self.c.hidden())),
            Array2::zeros((batch, self.d.hidden())),
        ]
    }

    fn forward(
        &self,
        steps: &[StepInput],
        state: &[Array2<f64>],
    ) -> Result<SegmentOutput<GlobalCache>, ModelError> {
        if state.len() != 2 {
            return Err(ModelError::Length {
                what: "hidden state tensors",
                got: state.len(),
                expected: 2,
            });
        }
        let (mut hc, mut hd) = (state[0].clone(), state[1].clone());
        let mut probs = Vec::with_capacity(steps.len());
        let mut cache = Vec::with_capacity(steps.len());
        for step in steps {
            let x = &step.global;
            let a = relu(&self.a.forward(x)?);
            let b = relu(&self.b.forward(&a)?);
            let (hc_next, c) = self.c.forward(&b, &hc)?;
            let (hd_next, d) = self.d.forward(&hc_next, &hd)?;
            probs.push(head(self.task, &self.e.forward(&hd_next)?));
            hc = hc_next;
            hd = hd_next;
            cache.push(StepCache {
                x: x.clone(),
                a,
                b,
                c,
                d,
                hd: hd.clone(),
            });
        }
        Ok(SegmentOutput {
            probs,
            state: vec![hc, hd],
            cache: GlobalCache { steps: cache },
        })
    }

    fn backward(&self, out: &SegmentOutput<GlobalCache>, dprobs: &[Array2<f64>]) -> Self {
        self.backward_cache(&out.cache, &out.probs, dprobs)
    }
}

fn run_single(net: &GlobalNet, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    let dim = net.a.n_in();
    let mut steps = Vec::with_capacity(seq.len());
    for v in seq {
        if v.len() != dim {
            return Err(ModelError::Length {
                what: "global feature length",
                got: v.len(),
                expected: dim,
            });
        }
        steps.push(StepInput {
            global: Array2::from_shape_vec((1, dim), v.clone()).expect("1×dim"),
            spatial: None,
        });
    }
    let out = net.forward(&steps, &net.init_state(1))?;
    Ok(out
        .probs
        .into_iter()
        .map(|p| p.into_raw_vec_and_offset().0)
        .collect())
}

/// Per-step win probability for one sequence, from a fresh hidden state.
pub fn gse_forward(net: &GlobalNet, seq: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    if net.n_out() != 1 {
        return Err(ModelError::Length {
            what: "GSE output size",
            got: net.n_out(),
            expected: 1,
        });
    }
    Ok(run_single(net, seq)?.into_iter().map(|p| p[0]).collect())
}

/// Per-step distribution over the action labels for one sequence.
pub fn bop_forward(net: &GlobalNet, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    run_single(net, seq)
}
