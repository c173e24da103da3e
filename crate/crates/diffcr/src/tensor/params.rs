//! Parameter storage and the Adam optimizer.

use ndarray::ArrayD;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Which subsystem a parameter belongs to. Training stages and the
/// checkpoint format both address parameters by group.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Autoenc,
    Codec,
    Denoiser,
    Control,
    Semantic,
    Fase,
    /// EMA shadow of the `Fase` group; never touched by the optimizer.
    FaseEma,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Autoenc,
        ParamGroup::Codec,
        ParamGroup::Denoiser,
        ParamGroup::Control,
        ParamGroup::Semantic,
        ParamGroup::Fase,
        ParamGroup::FaseEma,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::Autoenc => "autoenc",
            ParamGroup::Codec => "codec",
            ParamGroup::Denoiser => "denoiser",
            ParamGroup::Control => "control",
            ParamGroup::Semantic => "semantic",
            ParamGroup::Fase => "fase",
            ParamGroup::FaseEma => "fase_ema",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

struct Entry {
    name: String,
    group: ParamGroup,
    value: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// Flat arena of named parameters. Iteration order is creation order, which
/// the checkpoint format and the EMA pairing both rely on.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<f64>) -> ParamId {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.entries.push(Entry {
            name: name.into(),
            group,
            value,
            m,
            v,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn adam_state(&self, id: ParamId) -> (&ArrayD<f64>, &ArrayD<f64>) {
        (&self.entries[id.0].m, &self.entries[id.0].v)
    }

    pub fn set_adam_state(&mut self, id: ParamId, m: ArrayD<f64>, v: ArrayD<f64>) {
        assert_eq!(m.shape(), self.entries[id.0].value.shape());
        assert_eq!(v.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].m = m;
        self.entries[id.0].v = v;
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// EMA shadow update: `ema = mu * ema + (1 - mu) * src` for each pair.
    pub fn ema_update(&mut self, pairs: &[(ParamId, ParamId)], mu: f64) {
        for &(src, ema) in pairs {
            let s = self.entries[src.0].value.clone();
            let e = &mut self.entries[ema.0].value;
            e.zip_mut_with(&s, |ev, sv| *ev = mu * *ev + (1.0 - mu) * sv);
        }
    }

    /// Copy values from `src` params onto `dst` params (used to start the
    /// EMA shadow at the online weights).
    pub fn copy_values(&mut self, pairs: &[(ParamId, ParamId)]) {
        for &(src, dst) in pairs {
            let s = self.entries[src.0].value.clone();
            self.entries[dst.0].value = s;
        }
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip threshold on the global L2 norm of the whole gradient set.
    pub clip_norm: Option<f64>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            t: 0,
        }
    }
}

impl Adam {
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    /// Apply one update. Only gradients whose parameter is in `trainable`
    /// are used; everything else is ignored even if present in `grads`.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, ArrayD<f64>)],
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) {
        self.t += 1;
        let live: Vec<&(ParamId, ArrayD<f64>)> = grads
            .iter()
            .filter(|(id, _)| trainable(store.group(*id)))
            .collect();
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let sq: f64 = live
                .iter()
                .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in live {
            let e = &mut store.entries[id.0];
            ndarray::Zip::from(&mut e.value)
                .and(&mut e.m)
                .and(&mut e.v)
                .and(g)
                .for_each(|p, m, v, &gr| {
                    let gr = gr * scale;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * gr;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * gr * gr;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

/// Cosine-decayed learning rate from `base` to `base * floor_frac`.
pub fn cosine_lr(base: f64, step: u64, total: u64, floor_frac: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as f64) / (total as f64);
    let lo = base * floor_frac;
    lo + 0.5 * (base - lo) * (1.0 + (std::f64::consts::PI * p).cos())
}
