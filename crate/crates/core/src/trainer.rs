//! The full model (backbone stub, MFGM, projection, prototypes, classifier),
//! the step learning-rate schedule, momentum SGD and the training loop.

use serde::{Deserialize, Serialize};

use crate::error::{PdmError, Result};
use crate::losses::{
    compute_centers, cosine_heterogeneity_loss, cpm_loss, dual_center_separation_loss,
    identity_loss, total_loss, triplet_loss, ChVariant, ClassifierParams, IdentityBatch, LossParts,
    LossReport,
};
use crate::mfgm::{mfgm_forward, pointwise_linear, BranchParams, MfgmConfig};
use crate::ndnum::{Tape, Tensor, Var};
use crate::plm::{global_feature, plm_forward, PrototypeBank};
use crate::rng::{stream, uniform_tensor};
use crate::synthdata::{pk_sample, Dataset};

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

const INIT_STREAM: u64 = 7;

/// Architecture hyper-parameters. `prototypes == 0` drops the prototype
/// module; `branches == 0` drops MFGM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub branches: usize,
    pub reduction: usize,
    pub prototypes: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.classes == 0 {
            return Err(PdmError::contract("channels and classes must be positive"));
        }
        if self.branches > 0 {
            self.mfgm().validate()?;
        }
        if self.prototypes == 1 {
            return Err(PdmError::contract("at least two prototypes are required"));
        }
        if self.prototypes > 0 && self.channels % 2 != 0 {
            return Err(PdmError::Unsupported(format!(
                "prototype module needs an even channel count, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn mfgm(&self) -> MfgmConfig {
        MfgmConfig {
            branches: self.branches,
            channels: self.channels,
            reduction: self.reduction,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        (self.prototypes + 1) * self.channels
    }
}

/// Every learnable tensor of the model, generic over what is stored per
/// parameter (values, tape handles, gradients, velocities).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    /// `[c, c, 3, 3]`
    pub backbone: T,
    pub branches: Vec<BranchParams<T>>,
    /// `[(B+1)c, c]`, present when there are branches.
    pub projection: Option<T>,
    /// `[m, c]`
    pub prototypes: Option<T>,
    pub classifier: ClassifierParams<T>,
}

pub type ModelState = Model<Tensor>;

impl<T> Model<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Model<U> {
        Model {
            backbone: f(&self.backbone),
            branches: self.branches.iter().map(|b| b.map(&mut f)).collect(),
            projection: self.projection.as_ref().map(&mut f),
            prototypes: self.prototypes.as_ref().map(&mut f),
            classifier: self.classifier.map(&mut f),
        }
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("backbone".to_string(), &self.backbone)];
        for (i, b) in self.branches.iter().enumerate() {
            out.extend(
                b.named()
                    .into_iter()
                    .map(|(n, t)| (format!("branch{i}.{n}"), t)),
            );
        }
        if let Some(p) = &self.projection {
            out.push(("projection".into(), p));
        }
        if let Some(p) = &self.prototypes {
            out.push(("prototypes".into(), p));
        }
        out.extend(
            self.classifier
                .named()
                .into_iter()
                .map(|(n, t)| (format!("classifier.{n}"), t)),
        );
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("backbone".to_string(), &mut self.backbone)];
        for (i, b) in self.branches.iter_mut().enumerate() {
            out.extend(
                b.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("branch{i}.{n}"), t)),
            );
        }
        if let Some(p) = &mut self.projection {
            out.push(("projection".into(), p));
        }
        if let Some(p) = &mut self.prototypes {
            out.push(("prototypes".into(), p));
        }
        out.extend(
            self.classifier
                .named_mut()
                .into_iter()
                .map(|(n, t)| (format!("classifier.{n}"), t)),
        );
        out
    }
}

impl ModelState {
    pub fn shapes(cfg: &ModelConfig) -> Model<Vec<usize>> {
        let c = cfg.channels;
        Model {
            backbone: vec![c, c, 3, 3],
            branches: (0..cfg.branches)
                .map(|_| BranchParams::<Tensor>::shapes(&cfg.mfgm()))
                .collect(),
            projection: (cfg.branches > 0).then(|| vec![(cfg.branches + 1) * c, c]),
            prototypes: (cfg.prototypes > 0).then(|| vec![cfg.prototypes, c]),
            classifier: ClassifierParams::<Tensor>::shapes(cfg.descriptor_dim(), cfg.classes),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::shapes(cfg).map(|s| Tensor::zeros(s.clone()))
    }

    /// Backbone starts at the identity convolution plus small noise; the
    /// projection passes the input block through and mixes in the generated
    /// blocks with small weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, INIT_STREAM);
        let c = cfg.channels;
        let mut backbone = uniform_tensor(&mut rng, &[c, c, 3, 3], 0.1 / (9.0 * c as f64).sqrt());
        for i in 0..c {
            backbone.data_mut()[(i * c + i) * 9 + 4] += 1.0;
        }
        let branches = (0..cfg.branches)
            .map(|_| BranchParams::init(&cfg.mfgm(), &mut rng))
            .collect();
        let projection = (cfg.branches > 0).then(|| {
            let rows = (cfg.branches + 1) * c;
            let mut p = uniform_tensor(&mut rng, &[rows, c], 0.1 / (rows as f64).sqrt());
            p.data_mut()[..c * c].fill(0.0);
            for i in 0..c {
                p.data_mut()[i * c + i] = 1.0;
            }
            p
        });
        let prototypes = if cfg.prototypes > 0 {
            Some(PrototypeBank::init(cfg.prototypes, c, &mut rng)?.into_tensor())
        } else {
            None
        };
        let classifier = ClassifierParams::init(cfg.descriptor_dim(), cfg.classes, &mut rng);
        Ok(Model {
            backbone,
            branches,
            projection,
            prototypes,
            classifier,
        })
    }

    /// Architecture implied by the tensor shapes.
    pub fn config(&self) -> Result<ModelConfig> {
        let c = match self.backbone.shape() {
            [a, b, 3, 3] if a == b => *a,
            s => return Err(PdmError::Format(format!("backbone shape {s:?}"))),
        };
        let reduction = match self.branches.first() {
            Some(b) if b.dilated[0].shape()[0] > 0 => c / b.dilated[0].shape()[0],
            _ => MfgmConfig::default().reduction,
        };
        let cfg = ModelConfig {
            channels: c,
            branches: self.branches.len(),
            reduction,
            prototypes: self.prototypes.as_ref().map_or(0, |p| p.shape()[0]),
            classes: self.classifier.classes(),
        };
        let expected = Self::shapes(&cfg);
        let have = self.named();
        let want = expected.named();
        if have.len() != want.len() {
            return Err(PdmError::Format(
                "parameter set does not match any architecture".into(),
            ));
        }
        for ((name, t), (_, s)) in have.iter().zip(&want) {
            if t.shape() != s.as_slice() {
                return Err(PdmError::Format(format!(
                    "{name} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(cfg)
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epoch count the schedule boundaries are written for; boundaries are
    /// rescaled to `epochs` when the two differ.
    pub schedule_epochs: usize,
    pub base_lr: f64,
    pub warmup_epoch: usize,
    pub peak_lr: f64,
    pub first_decay_epoch: usize,
    pub first_decay_lr: f64,
    pub second_decay_epoch: usize,
    pub second_decay_lr: f64,
    pub momentum: f64,
    /// Global gradient norm cap applied before each step; 0 disables it.
    pub grad_clip: f64,
    pub prototypes: usize,
    pub branches: usize,
    pub reduction: usize,
    pub alpha: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub triplet_margin: f64,
    pub ids_per_batch: usize,
    pub samples_per_modality: usize,
    pub seed: u64,
    pub loss_ch_variant: ChVariant,
    pub use_plm: bool,
    pub use_ch: bool,
    pub use_dcs: bool,
    pub use_cpm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            schedule_epochs: 150,
            base_lr: 1e-2,
            warmup_epoch: 10,
            peak_lr: 1e-1,
            first_decay_epoch: 80,
            first_decay_lr: 1e-3,
            second_decay_epoch: 120,
            second_decay_lr: 1e-4,
            momentum: 0.9,
            grad_clip: 1.0,
            prototypes: 10,
            branches: 2,
            reduction: 4,
            alpha: 0.3,
            rho1: 0.1,
            rho2: 1.0,
            triplet_margin: 0.3,
            ids_per_batch: 4,
            samples_per_modality: 4,
            seed: 0,
            loss_ch_variant: ChVariant::Prose,
            use_plm: true,
            use_ch: true,
            use_dcs: true,
            use_cpm: true,
        }
    }
}

impl TrainConfig {
    /// No generated branches, no prototypes: identity and triplet losses on
    /// the pooled feature.
    pub fn baseline() -> Self {
        TrainConfig {
            branches: 0,
            use_plm: false,
            ..Default::default()
        }
    }

    /// Prototypes with their losses, no generated branches.
    pub fn plm_only() -> Self {
        TrainConfig {
            branches: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bounds = [
            self.warmup_epoch,
            self.first_decay_epoch,
            self.second_decay_epoch,
        ];
        if self.schedule_epochs == 0 || bounds.windows(2).any(|w| w[0] > w[1]) {
            return Err(PdmError::contract(
                "schedule epochs must be positive and monotone",
            ));
        }
        let lrs = [
            self.base_lr,
            self.peak_lr,
            self.first_decay_lr,
            self.second_decay_lr,
        ];
        if lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(PdmError::contract("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PdmError::contract("momentum must lie in [0, 1)"));
        }
        if self.ids_per_batch < 2 || self.samples_per_modality == 0 {
            return Err(PdmError::contract(
                "batches need at least two identities and one sample per modality",
            ));
        }
        if self.use_plm && self.prototypes < 2 {
            return Err(PdmError::contract("at least two prototypes are required"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("triplet_margin", self.triplet_margin),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PdmError::contract(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, channels: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            channels,
            branches: self.branches,
            reduction: self.reduction,
            prototypes: if self.use_plm { self.prototypes } else { 0 },
            classes,
        }
    }

    fn boundary(&self, epoch: usize) -> usize {
        if self.epochs == self.schedule_epochs {
            epoch
        } else {
            (epoch * self.epochs + self.schedule_epochs / 2) / self.schedule_epochs
        }
    }
}

/// Piecewise-constant schedule: base rate, then peak after the warm-up
/// epoch, then two decays.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(PdmError::contract(format!(
            "epoch {epoch} outside a {}-epoch schedule",
            cfg.epochs
        )));
    }
    Ok(if epoch < cfg.boundary(cfg.warmup_epoch) {
        cfg.base_lr
    } else if epoch < cfg.boundary(cfg.first_decay_epoch) {
        cfg.peak_lr
    } else if epoch < cfg.boundary(cfg.second_decay_epoch) {
        cfg.first_decay_lr
    } else {
        cfg.second_decay_lr
    })
}

/// Classical momentum: `v = μv + g; θ -= lr·v`. Nothing is updated when any
/// gradient is non-finite.
pub fn sgd_step(
    state: &mut ModelState,
    velocity: &mut ModelState,
    grads: &ModelState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let grads = grads.named();
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(PdmError::numeric(name.clone(), "non-finite gradient"));
        }
    }
    let params = state.named_mut();
    let vels = velocity.named_mut();
    if params.len() != grads.len() || vels.len() != grads.len() {
        return Err(PdmError::contract("gradients do not match the parameters"));
    }
    for (((name, p), (_, v)), (_, g)) in params.into_iter().zip(vels).zip(&grads) {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(PdmError::contract(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Rescales all gradients together so their joint L2 norm is at most `cap`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelState, cap: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if cap > 0.0 && norm > cap {
        let k = cap / norm;
        for (_, g) in grads.named_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[N, d]`
    pub descriptor: Var,
    /// `[N, c]` pooled input of the prototype module.
    pub global: Var,
    /// `[N, c]` pooled backbone output, when there are branches.
    pub original: Option<Var>,
    /// `[N, c]` pooled generated maps.
    pub generated: Vec<Var>,
    /// `[N, m, n]` prototype responses before the sigmoid.
    pub responses: Option<Var>,
}

/// Backbone, optional MFGM with projection, then prototypes (or plain
/// pooling) on a batch `[N, c, h, w]`.
pub fn forward_pipeline(tape: &mut Tape, model: &Model<Var>, x: Var) -> Result<Forward> {
    if tape.shape(x).len() != 4 {
        return Err(PdmError::contract(format!(
            "pipeline input must be [N,c,h,w], got {:?}",
            tape.shape(x)
        )));
    }
    let f = tape.conv2d(x, model.backbone, 1)?;
    let (g, original, generated) = match model.projection {
        Some(proj) if !model.branches.is_empty() => {
            let c = tape.shape(f)[1];
            let reduced = tape.shape(model.branches[0].dilated[0])[0];
            let cfg = MfgmConfig {
                branches: model.branches.len(),
                channels: c,
                reduction: c / reduced.max(1),
            };
            let out = mfgm_forward(tape, f, &cfg, &model.branches)?;
            let g = pointwise_linear(tape, out.stacked, proj, None)?;
            let original = global_feature(tape, f)?;
            let generated = out
                .generated
                .iter()
                .map(|&m| global_feature(tape, m))
                .collect::<Result<Vec<_>>>()?;
            (g, Some(original), generated)
        }
        None if model.branches.is_empty() => (f, None, Vec::new()),
        _ => {
            return Err(PdmError::contract(
                "branches and projection must come together",
            ))
        }
    };
    match model.prototypes {
        Some(p) => {
            let out = plm_forward(tape, g, p)?;
            Ok(Forward {
                descriptor: out.descriptor,
                global: out.global,
                original,
                generated,
                responses: Some(out.logits),
            })
        }
        None => {
            let global = global_feature(tape, g)?;
            Ok(Forward {
                descriptor: global,
                global,
                original,
                generated,
                responses: None,
            })
        }
    }
}

/// Descriptors `[N, d]` for every sample, computed in chunks.
pub fn embed(state: &ModelState, dataset: &Dataset) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in indices.chunks(CHUNK) {
        let mut tape = Tape::new();
        let vars = state.map(|t| tape.constant(t.clone()));
        let (x, _, _) = dataset.gather(chunk)?;
        let x = tape.constant(x);
        let fw = forward_pipeline(&mut tape, &vars, x)?;
        dim = tape.shape(fw.descriptor)[1];
        data.extend_from_slice(tape.value(fw.descriptor).data());
    }
    Tensor::new([dataset.len(), dim], data)
}

fn in_component<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        PdmError::Numeric { component, detail } => PdmError::Numeric {
            component: name.to_string(),
            detail: format!("{component}: {detail}"),
        },
        other => other,
    })
}

/// Forward, all enabled losses, backward and one SGD update on one batch.
pub fn train_step(
    state: &mut ModelState,
    velocity: &mut ModelState,
    cfg: &TrainConfig,
    dataset: &Dataset,
    batch: &[usize],
    lr: f64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let vars = state.map(|t| tape.param(t.clone()));
    let (x, labels, modalities) = dataset.gather(batch)?;
    let x = tape.constant(x);
    let fw = in_component("forward", forward_pipeline(&mut tape, &vars, x))?;
    let batch = IdentityBatch {
        descriptors: fw.descriptor,
        global: fw.global,
        labels,
        modalities,
        original: fw.original,
        generated: fw.generated.clone(),
    };
    let centers = compute_centers(&mut tape, &batch)?;

    let mut terms: Vec<Var> = Vec::new();
    let value = |tape: &Tape, v: Var| tape.value(v).item();

    let id = in_component(
        "id",
        identity_loss(
            &mut tape,
            batch.descriptors,
            &batch.labels,
            &vars.classifier,
        ),
    )?;
    let tri = in_component(
        "tri",
        triplet_loss(&mut tape, batch.global, &batch.labels, cfg.triplet_margin),
    )?;
    let mut parts = LossParts {
        id: value(&tape, id)?,
        tri: value(&tape, tri)?,
        ..Default::default()
    };
    terms.extend([id, tri]);
    if let Some(responses) = fw.responses {
        if cfg.use_ch {
            let ch = in_component(
                "ch",
                cosine_heterogeneity_loss(&mut tape, responses, cfg.loss_ch_variant),
            )?;
            parts.ch = value(&tape, ch)?;
            terms.push(ch);
        }
        if cfg.use_dcs {
            let dcs = in_component(
                "dcs",
                dual_center_separation_loss(&mut tape, &batch, &centers, cfg.rho1, cfg.rho2),
            )?;
            parts.dcs = value(&tape, dcs)?;
            terms.push(dcs);
        }
    }
    if cfg.use_cpm && !batch.generated.is_empty() {
        let cpm = in_component("cpm", cpm_loss(&mut tape, &centers, cfg.alpha))?;
        parts.cpm = value(&tape, cpm)?;
        terms.push(cpm);
    }
    let report = total_loss(parts)?;

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let grads = in_component("backward", tape.backward(total))?;
    let mut grads = vars.map(|v| grads.wrt(*v));
    clip_global_norm(&mut grads, cfg.grad_clip);
    sgd_step(state, velocity, &grads, lr, cfg.momentum)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch reports.
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochLog>,
}

pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(dataset.channels, dataset.num_identities);
    let state = ModelState::init(&model_cfg, cfg.seed)?;
    train_from(cfg, dataset, state)
}

pub fn train_from(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut state: ModelState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut velocity = state.map(|t| Tensor::zeros(t.shape().to_vec()));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg)?;
        let batches = pk_sample(
            dataset,
            cfg.ids_per_batch,
            cfg.samples_per_modality,
            cfg.seed,
            epoch as u64,
        )?;
        let mut sum = LossReport::default();
        for batch in &batches {
            let r = train_step(&mut state, &mut velocity, cfg, dataset, batch, lr)?;
            sum.id += r.id;
            sum.tri += r.tri;
            sum.ch += r.ch;
            sum.dcs += r.dcs;
            sum.cpm += r.cpm;
        }
        let k = batches.len().max(1) as f64;
        let report = total_loss(LossParts {
            id: sum.id / k,
            tri: sum.tri / k,
            ch: sum.ch / k,
            dcs: sum.dcs / k,
            cpm: sum.cpm / k,
        })?;
        log.push(EpochLog { epoch, lr, report });
    }
    Ok(TrainOutcome { state, log })
}

/// Loss log as CSV: `epoch,lr,id,tri,ch,dcs,cpm,plm,total`.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,id,tri,ch,dcs,cpm,plm,total\n");
    for e in log {
        let r = &e.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.epoch, e.lr, r.id, r.tri, r.ch, r.dcs, r.cpm, r.plm, r.total
        ));
    }
    out
}
