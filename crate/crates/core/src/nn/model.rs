use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::layers::{self, BnCache, ConvGeom};
use super::tensor::{Scalar, Tensor};
use super::NetworkError;
use crate::seed;
use crate::task::Task;

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Running statistics (inference and frozen backbones).
    Running,
}

/// A fused convolution + batch norm + ReLU unit.
#[derive(Debug, Clone)]
struct Unit {
    name: String,
    geom: ConvGeom,
    weight: String,
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl Unit {
    fn new(name: String, geom: ConvGeom) -> Self {
        Self {
            weight: format!("{name}.conv.weight"),
            gamma: format!("{name}.bn.gamma"),
            beta: format!("{name}.bn.beta"),
            running_mean: format!("{name}.bn.running_mean"),
            running_var: format!("{name}.bn.running_var"),
            name,
            geom,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv(usize),
    AvgPool,
    MaxPool,
}

#[derive(Debug, Clone)]
struct BlockPlan {
    branches: Vec<Vec<Op>>,
    widths: Vec<usize>,
}

/// Static layer graph derived from a [`ModelConfig`].
#[derive(Debug, Clone)]
struct Plan {
    units: Vec<Unit>,
    stem: Vec<usize>,
    blocks: Vec<BlockPlan>,
    embed: Option<usize>,
    /// Names of the layer outputs in execution order.
    layers: Vec<String>,
}

impl Plan {
    fn new(config: &ModelConfig) -> Self {
        let mut units = Vec::new();
        let mut add = |name: String, geom: ConvGeom| {
            units.push(Unit::new(name, geom));
            units.len() - 1
        };
        let [s0, s1] = config.stem_widths();
        let stem = vec![add("stem.0".into(), ConvGeom::square(1, s0, 3, 2)), add("stem.1".into(), ConvGeom::square(s0, s1, 3, 2))];
        let mut layers = vec!["stem.0".to_string(), "stem.1".to_string()];
        let mut cin = s1;
        let mut blocks = Vec::new();
        for (b, bc) in config.inception_blocks.iter().enumerate() {
            let s = bc.stride;
            let k = bc.factorized_kernel;
            let p = |suffix: &str| format!("block.{b}.{suffix}");
            let one = vec![Op::Conv(add(p("b1x1"), ConvGeom::square(cin, bc.branch_1x1, 1, s)))];
            let (fr, fo) = (bc.factorized.reduce, bc.factorized.out);
            let fact = vec![
                Op::Conv(add(p("fact.0"), ConvGeom::square(cin, fr, 1, 1))),
                Op::Conv(add(p("fact.1"), ConvGeom { cin: fr, cout: fo, kh: 1, kw: k, stride: 1, ph: 0, pw: k / 2 })),
                Op::Conv(add(p("fact.2"), ConvGeom { cin: fo, cout: fo, kh: k, kw: 1, stride: s, ph: k / 2, pw: 0 })),
            ];
            let (dr, dout) = (bc.double_3x3.reduce, bc.double_3x3.out);
            let dbl = vec![
                Op::Conv(add(p("dbl.0"), ConvGeom::square(cin, dr, 1, 1))),
                Op::Conv(add(p("dbl.1"), ConvGeom::square(dr, dout, 3, 1))),
                Op::Conv(add(p("dbl.2"), ConvGeom::square(dout, dout, 3, s))),
            ];
            let pool = vec![
                if s == 1 { Op::AvgPool } else { Op::MaxPool },
                Op::Conv(add(p("pool"), ConvGeom::square(cin, bc.pool_proj, 1, 1))),
            ];
            blocks.push(BlockPlan {
                branches: vec![one, fact, dbl, pool],
                widths: vec![bc.branch_1x1, fo, dout, bc.pool_proj],
            });
            layers.push(format!("block.{b}"));
            cin = bc.out_channels();
        }
        let embed = (cin != config.embedding_dim).then(|| {
            layers.push("embed".into());
            add("embed".into(), ConvGeom::square(cin, config.embedding_dim, 1, 1))
        });
        Self { units, stem, blocks, embed, layers }
    }
}

/// Softmax classifier on the pooled embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead<T> {
    pub task: Task,
    /// (embedding_dim, n_classes)
    pub weight: Tensor<T>,
    /// (n_classes)
    pub bias: Tensor<T>,
}

impl<T: Scalar> TaskHead<T> {
    fn new(task: Task, embedding_dim: usize, seed: u64) -> Self {
        let k = task.n_classes();
        let name = head_weight_name(task);
        Self {
            task,
            weight: he_uniform(&[embedding_dim, k], embedding_dim, seed, &name),
            bias: Tensor::zeros(&[k]),
        }
    }

    fn logits(&self, emb: &Tensor<T>) -> Tensor<T> {
        let (b, e) = (emb.shape()[0], emb.shape()[1]);
        let k = self.task.n_classes();
        let mut out = vec![T::zero(); b * k];
        T::gemm(b, e, k, emb.data(), false, self.weight.data(), false, &mut out, false);
        for row in out.chunks_mut(k) {
            for (v, &bias) in row.iter_mut().zip(self.bias.data()) {
                *v = *v + bias;
            }
        }
        Tensor::from_vec(&[b, k], out)
    }
}

pub fn head_weight_name(task: Task) -> String {
    format!("head.{}.weight", task.name())
}

pub fn head_bias_name(task: Task) -> String {
    format!("head.{}.bias", task.name())
}

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut rng = seed::rng(seed::derive(seed, &[seed::name_hash(name)]));
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect())
}

/// Batch statistics of one normalization layer, ready to be folded into
/// the running averages.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub unit: String,
    pub mean: Vec<T>,
    /// Biased variance over `count` values per channel.
    pub var: Vec<T>,
    pub count: usize,
}

/// Result of [`Model::loss_and_grads`].
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub loss: T,
    /// Keyed by parameter name; covers exactly [`Model::trainable_names`].
    pub grads: BTreeMap<String, Tensor<T>>,
    pub logits: Tensor<T>,
    /// Empty when the backbone ran on running statistics.
    pub bn_stats: Vec<BnStats<T>>,
}

#[derive(Debug, Clone)]
struct UnitCache<T> {
    x: Tensor<T>,
    y: Tensor<T>,
    bn: BnCache<T>,
}

#[derive(Debug, Clone)]
enum OpCache<T> {
    Unit(UnitCache<T>),
    Avg,
    Max { arg: Vec<u32>, in_shape: Vec<usize> },
}

#[derive(Debug, Default)]
struct Trace<T> {
    stem: Vec<UnitCache<T>>,
    blocks: Vec<Vec<Vec<OpCache<T>>>>,
    block_inputs: Vec<Vec<usize>>,
    embed: Option<UnitCache<T>>,
    /// Output of every entry of `Plan::layers`.
    outputs: Vec<Tensor<T>>,
}

/// Inception-style backbone with per-task softmax heads.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    plan: Plan,
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    heads: BTreeMap<Task, TaskHead<T>>,
    pub frozen_backbone: bool,
}

pub fn build_model<T: Scalar>(config: &ModelConfig, tasks: &[Task], seed: u64) -> Result<Model<T>, NetworkError> {
    Model::build(config, tasks, seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, tasks: &[Task], seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let plan = Plan::new(config);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for u in &plan.units {
            let c = u.geom.cout;
            params.insert(u.weight.clone(), he_uniform(&u.geom.weight_shape(), u.geom.fan_in(), seed, &u.weight));
            params.insert(u.gamma.clone(), Tensor::filled(&[c], T::one()));
            params.insert(u.beta.clone(), Tensor::zeros(&[c]));
            buffers.insert(u.running_mean.clone(), Tensor::zeros(&[c]));
            buffers.insert(u.running_var.clone(), Tensor::filled(&[c], T::one()));
        }
        let mut model =
            Self { config: config.clone(), plan, params, buffers, heads: BTreeMap::new(), frozen_backbone: false };
        for &t in tasks.iter().collect::<BTreeSet<_>>() {
            model.attach_head(t, seed);
        }
        Ok(model)
    }

    /// Assembles a model from stored tensors, checking every name and shape.
    pub(crate) fn from_parts(
        config: ModelConfig,
        mut tensors: BTreeMap<String, Tensor<T>>,
        tasks: &[Task],
        frozen_backbone: bool,
    ) -> Result<Self, NetworkError> {
        let mut model = Self::build(&config, tasks, 0)?;
        model.frozen_backbone = frozen_backbone;
        let mut take = |name: &str, expect: &[usize]| -> Result<Tensor<T>, NetworkError> {
            let t = tensors.remove(name).ok_or_else(|| NetworkError::Decode(format!("missing tensor {name}")))?;
            if t.shape() != expect {
                return Err(NetworkError::Decode(format!("tensor {name} has shape {:?}, expected {expect:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(NetworkError::Decode(format!("tensor {name} holds non-finite values")));
            }
            Ok(t)
        };
        for store in [&mut model.params, &mut model.buffers] {
            for (name, t) in store.iter_mut() {
                *t = take(name, t.shape())?;
            }
        }
        for head in model.heads.values_mut() {
            head.weight = take(&head_weight_name(head.task), head.weight.shape())?;
            head.bias = take(&head_bias_name(head.task), head.bias.shape())?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(NetworkError::Decode(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.heads.keys().copied().collect()
    }

    pub fn has_head(&self, task: Task) -> bool {
        self.heads.contains_key(&task)
    }

    pub fn head(&self, task: Task) -> Result<&TaskHead<T>, NetworkError> {
        self.heads.get(&task).ok_or(NetworkError::MissingHead(task))
    }

    /// Installs a freshly initialized head for `task`, replacing any existing one.
    pub fn attach_head(&mut self, task: Task, seed: u64) {
        self.heads.insert(task, TaskHead::new(task, self.config.embedding_dim, seed));
    }

    pub fn replace_head(&mut self, task: Task, seed: u64) {
        self.attach_head(task, seed);
    }

    /// Layer names usable as activation-map sources, in execution order.
    pub fn layer_names(&self) -> &[String] {
        &self.plan.layers
    }

    /// Name of the final convolutional feature map.
    pub fn last_layer(&self) -> &str {
        self.plan.layers.last().expect("at least one layer")
    }

    pub fn backbone_params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    /// Every stored tensor (parameters, buffers, heads) by name.
    pub fn named_tensors(&self) -> BTreeMap<String, &Tensor<T>> {
        let mut out: BTreeMap<String, &Tensor<T>> =
            self.params.iter().chain(&self.buffers).map(|(k, v)| (k.clone(), v)).collect();
        for h in self.heads.values() {
            out.insert(head_weight_name(h.task), &h.weight);
            out.insert(head_bias_name(h.task), &h.bias);
        }
        out
    }

    /// Number of trainable scalars: backbone parameters plus all heads.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum::<usize>()
            + self.heads.values().map(|h| h.weight.len() + h.bias.len()).sum::<usize>()
    }

    /// Parameters that [`Model::loss_and_grads`] differentiates for `task`.
    pub fn trainable_names(&self, task: Task) -> Vec<String> {
        let mut names = vec![head_bias_name(task), head_weight_name(task)];
        if !self.frozen_backbone {
            names.extend(self.params.keys().cloned());
        }
        names.sort();
        names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        if let Some(t) = self.params.get(name) {
            return Some(t);
        }
        self.heads.values().find_map(|h| {
            if name == head_weight_name(h.task) {
                Some(&h.weight)
            } else if name == head_bias_name(h.task) {
                Some(&h.bias)
            } else {
                None
            }
        })
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(t) = self.params.get_mut(name) {
            return Some(t);
        }
        self.heads.values_mut().find_map(|h| {
            if name == head_weight_name(h.task) {
                Some(&mut h.weight)
            } else if name == head_bias_name(h.task) {
                Some(&mut h.bias)
            } else {
                None
            }
        })
    }

    /// SHA-256 over the names, shapes and values of every backbone parameter
    /// and buffer. Heads are excluded.
    pub fn backbone_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.params.iter().chain(&self.buffers) {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_f64().unwrap().to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            heads: self
                .heads
                .iter()
                .map(|(&t, h)| (t, TaskHead { task: t, weight: h.weight.cast(), bias: h.bias.cast() }))
                .collect(),
            frozen_backbone: self.frozen_backbone,
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<(), NetworkError> {
        let (h, w) = self.config.input_size;
        let s = batch.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(NetworkError::ShapeMismatch(format!("batch shape {s:?}, expected (B>=1, 1, {h}, {w})")));
        }
        Ok(())
    }

    fn run_unit(
        &self,
        u: usize,
        x: Tensor<T>,
        mode: BnMode,
        keep: bool,
        stats: &mut Vec<BnStats<T>>,
    ) -> (Tensor<T>, Option<UnitCache<T>>) {
        let unit = &self.plan.units[u];
        let z = layers::conv_forward(&x, self.params[&unit.weight].data(), &unit.geom);
        let running = match mode {
            BnMode::Batch => None,
            BnMode::Running => Some((self.buffers[&unit.running_mean].data(), self.buffers[&unit.running_var].data())),
        };
        let (y, bn, batch_stats) = layers::bn_relu_forward(
            &z,
            self.params[&unit.gamma].data(),
            self.params[&unit.beta].data(),
            running,
            self.config.bn_epsilon,
        );
        if let Some((mean, var)) = batch_stats {
            let s = z.shape();
            stats.push(BnStats { unit: unit.name.clone(), mean, var, count: s[0] * s[2] * s[3] });
        }
        let cache = keep.then(|| UnitCache { x, y: y.clone(), bn });
        (y, cache)
    }

    fn forward_backbone(&self, batch: &Tensor<T>, mode: BnMode, keep: bool) -> (Tensor<T>, Trace<T>, Vec<BnStats<T>>) {
        let mut stats = Vec::new();
        let mut trace = Trace { stem: Vec::new(), blocks: Vec::new(), block_inputs: Vec::new(), embed: None, outputs: Vec::new() };
        let mut cur = batch.clone();
        for &u in &self.plan.stem {
            let (y, cache) = self.run_unit(u, cur, mode, keep, &mut stats);
            if keep {
                trace.stem.push(cache.unwrap());
                trace.outputs.push(y.clone());
            }
            cur = y;
        }
        for block in &self.plan.blocks {
            let mut outs = Vec::with_capacity(block.branches.len());
            let mut caches = Vec::new();
            for ops in &block.branches {
                let mut x = cur.clone();
                let mut branch_cache = Vec::new();
                for op in ops {
                    x = match *op {
                        Op::Conv(u) => {
                            let (y, c) = self.run_unit(u, x, mode, keep, &mut stats);
                            if let Some(c) = c {
                                branch_cache.push(OpCache::Unit(c));
                            }
                            y
                        }
                        Op::AvgPool => {
                            if keep {
                                branch_cache.push(OpCache::Avg);
                            }
                            layers::avg_pool3_forward(&x)
                        }
                        Op::MaxPool => {
                            let (y, arg) = layers::max_pool3s2_forward(&x);
                            if keep {
                                branch_cache.push(OpCache::Max { arg, in_shape: x.shape().to_vec() });
                            }
                            y
                        }
                    };
                }
                outs.push(x);
                caches.push(branch_cache);
            }
            let out = layers::concat_channels(&outs);
            if keep {
                trace.blocks.push(caches);
                trace.block_inputs.push(cur.shape().to_vec());
                trace.outputs.push(out.clone());
            }
            cur = out;
        }
        if let Some(u) = self.plan.embed {
            let (y, cache) = self.run_unit(u, cur, mode, keep, &mut stats);
            if keep {
                trace.embed = cache;
                trace.outputs.push(y.clone());
            }
            cur = y;
        }
        (layers::gap_forward(&cur), trace, stats)
    }

    fn unit_backward(
        &self,
        u: usize,
        cache: &UnitCache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
        grads: Option<&mut BTreeMap<String, Tensor<T>>>,
    ) -> Option<Tensor<T>> {
        let unit = &self.plan.units[u];
        let gamma = self.params[&unit.gamma].data();
        let (dz, dg, db) = layers::bn_relu_backward(dy, &cache.y, &cache.bn, gamma);
        let w = self.params[&unit.weight].data();
        let (dx, dw) = layers::conv_backward(&cache.x, w, &unit.geom, &dz, need_dx, grads.is_some());
        if let Some(g) = grads {
            let c = unit.geom.cout;
            g.insert(unit.weight.clone(), Tensor::from_vec(&unit.geom.weight_shape(), dw.unwrap()));
            g.insert(unit.gamma.clone(), Tensor::from_vec(&[c], dg));
            g.insert(unit.beta.clone(), Tensor::from_vec(&[c], db));
        }
        dx
    }

    /// Backpropagates from the embedding gradient. Stops early and returns
    /// the gradient at layer `stop_at` when given.
    fn backward(
        &self,
        trace: &Trace<T>,
        d_emb: &Tensor<T>,
        stop_at: Option<usize>,
        mut grads: Option<&mut BTreeMap<String, Tensor<T>>>,
    ) -> Option<Tensor<T>> {
        let last = trace.outputs.last().expect("trace kept");
        let s = last.shape();
        let mut d = layers::gap_backward(d_emb, s[2], s[3]);
        let mut layer = self.plan.layers.len() - 1;
        if let (Some(u), Some(cache)) = (self.plan.embed, &trace.embed) {
            if stop_at == Some(layer) {
                return Some(d);
            }
            d = self.unit_backward(u, cache, &d, true, grads.as_deref_mut()).unwrap();
            layer -= 1;
        }
        for (b, block) in self.plan.blocks.iter().enumerate().rev() {
            if stop_at == Some(layer) {
                return Some(d);
            }
            let parts = layers::split_channels(&d, &block.widths);
            let mut d_in = Tensor::zeros(&trace.block_inputs[b]);
            for ((ops, caches), mut g) in block.branches.iter().zip(&trace.blocks[b]).zip(parts) {
                for (op, cache) in ops.iter().zip(caches).rev() {
                    g = match (op, cache) {
                        (Op::Conv(u), OpCache::Unit(c)) => {
                            self.unit_backward(*u, c, &g, true, grads.as_deref_mut()).unwrap()
                        }
                        (Op::AvgPool, OpCache::Avg) => layers::avg_pool3_backward(&g),
                        (Op::MaxPool, OpCache::Max { arg, in_shape }) => layers::max_pool3s2_backward(&g, arg, in_shape),
                        _ => unreachable!("trace does not match plan"),
                    };
                }
                d_in.add_assign(&g);
            }
            d = d_in;
            layer -= 1;
        }
        for (i, &u) in self.plan.stem.iter().enumerate().rev() {
            if stop_at == Some(layer) {
                return Some(d);
            }
            let need_dx = i > 0;
            {
                let dx = self.unit_backward(u, &trace.stem[i], &d, need_dx, grads.as_deref_mut())?;
                d = dx
            }
            layer = layer.saturating_sub(1);
        }
        None
    }

    /// Pooled embeddings (B, embedding_dim).
    pub fn embed(&self, batch: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>, NetworkError> {
        self.check_batch(batch)?;
        Ok(self.forward_backbone(batch, mode, false).0)
    }

    /// Inference logits (B, n_classes) using running statistics.
    pub fn forward(&self, batch: &Tensor<T>, task: Task) -> Result<Tensor<T>, NetworkError> {
        let head = self.head(task)?;
        Ok(head.logits(&self.embed(batch, BnMode::Running)?))
    }

    fn train_mode(&self) -> BnMode {
        if self.frozen_backbone {
            BnMode::Running
        } else {
            BnMode::Batch
        }
    }

    fn check_labels(&self, batch: &Tensor<T>, labels: &[usize], task: Task) -> Result<(), NetworkError> {
        if labels.len() != batch.shape()[0] {
            return Err(NetworkError::ShapeMismatch(format!("{} labels for a batch of {}", labels.len(), batch.shape()[0])));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= task.n_classes()) {
            return Err(NetworkError::LabelOutOfRange { label: bad, n_classes: task.n_classes() });
        }
        Ok(())
    }

    /// Mean cross-entropy in the same mode [`Model::loss_and_grads`] uses.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[usize], task: Task) -> Result<T, NetworkError> {
        let head = self.head(task)?;
        self.check_batch(batch)?;
        self.check_labels(batch, labels, task)?;
        let (emb, _, _) = self.forward_backbone(batch, self.train_mode(), false);
        Ok(cross_entropy(&head.logits(&emb), labels).0)
    }

    /// [`Model::loss`] plus a hash of the piecewise-smooth region the loss is
    /// evaluated in: which ReLUs are active and which inputs win each max
    /// pool.
    pub fn loss_with_signature(&self, batch: &Tensor<T>, labels: &[usize], task: Task) -> Result<(T, u64), NetworkError> {
        use std::hash::Hasher;
        fn relu_bits<T: Scalar>(h: &mut impl Hasher, c: &UnitCache<T>) {
            for chunk in c.y.data().chunks(64) {
                let bits = chunk.iter().enumerate().fold(0u64, |b, (i, v)| b | (u64::from(*v > T::zero()) << i));
                h.write_u64(bits);
            }
        }
        let head = self.head(task)?;
        self.check_batch(batch)?;
        self.check_labels(batch, labels, task)?;
        let (emb, trace, _) = self.forward_backbone(batch, self.train_mode(), true);
        let mut h = std::collections::hash_map::DefaultHasher::new();
        trace.stem.iter().for_each(|c| relu_bits(&mut h, c));
        for op in trace.blocks.iter().flatten().flatten() {
            match op {
                OpCache::Unit(c) => relu_bits(&mut h, c),
                OpCache::Max { arg, .. } => arg.iter().for_each(|&a| h.write_u32(a)),
                OpCache::Avg => {}
            }
        }
        trace.embed.iter().for_each(|c| relu_bits(&mut h, c));
        Ok((cross_entropy(&head.logits(&emb), labels).0, h.finish()))
    }

    /// Mean categorical cross-entropy and its exact gradient with respect to
    /// every trainable parameter. The backbone runs on batch statistics
    /// unless frozen; the returned `bn_stats` are not applied here.
    pub fn loss_and_grads(&self, batch: &Tensor<T>, labels: &[usize], task: Task) -> Result<LossGrads<T>, NetworkError> {
        let head = self.head(task)?;
        self.check_batch(batch)?;
        self.check_labels(batch, labels, task)?;
        if self.frozen_backbone {
            let emb = self.forward_backbone(batch, BnMode::Running, false).0;
            return self.head_loss_and_grads(&emb, labels, task);
        }
        let (emb, trace, bn_stats) = self.forward_backbone(batch, BnMode::Batch, true);
        let mut out = self.head_loss_and_grads(&emb, labels, task)?;
        let (b, e) = (emb.shape()[0], emb.shape()[1]);
        let dlogits = cross_entropy(&out.logits, labels).1;
        let mut d_emb = vec![T::zero(); b * e];
        T::gemm(b, task.n_classes(), e, dlogits.data(), false, head.weight.data(), true, &mut d_emb, false);
        self.backward(&trace, &Tensor::from_vec(&[b, e], d_emb), None, Some(&mut out.grads));
        out.bn_stats = bn_stats;
        Ok(out)
    }

    /// Loss and head gradients from precomputed embeddings (B, embedding_dim).
    /// With a frozen backbone this equals [`Model::loss_and_grads`] on the
    /// images the embeddings came from.
    pub fn head_loss_and_grads(&self, emb: &Tensor<T>, labels: &[usize], task: Task) -> Result<LossGrads<T>, NetworkError> {
        let head = self.head(task)?;
        let e = self.config.embedding_dim;
        if emb.shape().len() != 2 || emb.shape()[1] != e || emb.shape()[0] != labels.len() {
            return Err(NetworkError::ShapeMismatch(format!(
                "embeddings {:?} for {} labels, expected (B, {e})",
                emb.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= task.n_classes()) {
            return Err(NetworkError::LabelOutOfRange { label: bad, n_classes: task.n_classes() });
        }
        let logits = head.logits(emb);
        let (loss, dlogits) = cross_entropy(&logits, labels);
        let (b, k) = (emb.shape()[0], task.n_classes());
        let mut dw = vec![T::zero(); e * k];
        T::gemm(e, b, k, emb.data(), true, dlogits.data(), false, &mut dw, false);
        let mut db = vec![T::zero(); k];
        for row in dlogits.data().chunks(k) {
            for (a, &v) in db.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        let mut grads = BTreeMap::new();
        grads.insert(head_weight_name(task), Tensor::from_vec(&[e, k], dw));
        grads.insert(head_bias_name(task), Tensor::from_vec(&[k], db));
        Ok(LossGrads { loss, grads, logits, bn_stats: Vec::new() })
    }

    /// Head logits for precomputed embeddings.
    pub fn head_logits(&self, emb: &Tensor<T>, task: Task) -> Result<Tensor<T>, NetworkError> {
        Ok(self.head(task)?.logits(emb))
    }

    /// Folds batch statistics into the running averages with the configured
    /// momentum. Variances are Bessel-corrected first.
    pub fn apply_bn_stats(&mut self, stats: &[BnStats<T>]) {
        self.apply_bn_stats_with(stats, self.config.bn_momentum);
    }

    /// [`Model::apply_bn_stats`] with an explicit momentum.
    pub fn apply_bn_stats_with(&mut self, stats: &[BnStats<T>], momentum: f64) {
        let m = T::lit(momentum);
        for s in stats {
            let unit = self.plan.units.iter().find(|u| u.name == s.unit).expect("known unit");
            let correction = if s.count > 1 { T::lit(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            let rm = self.buffers.get_mut(&unit.running_mean).unwrap();
            for (r, &v) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = m * *r + (T::one() - m) * v;
            }
            let rv = self.buffers.get_mut(&unit.running_var).unwrap();
            for (r, &v) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = m * *r + (T::one() - m) * v * correction;
            }
        }
    }

    /// Feature maps of `layer` for a single image and the gradient of the
    /// `class` logit with respect to them, both (C, h, w).
    pub fn layer_gradient(
        &self,
        image: &Tensor<T>,
        task: Task,
        class: usize,
        layer: &str,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NetworkError> {
        let head = self.head(task)?;
        self.check_batch(image)?;
        if image.shape()[0] != 1 {
            return Err(NetworkError::ShapeMismatch("layer gradients take a single image".into()));
        }
        if class >= task.n_classes() {
            return Err(NetworkError::LabelOutOfRange { label: class, n_classes: task.n_classes() });
        }
        let idx = self
            .plan
            .layers
            .iter()
            .position(|l| l == layer)
            .ok_or_else(|| NetworkError::UnknownLayer(layer.to_string()))?;
        let (emb, trace, _) = self.forward_backbone(image, BnMode::Running, true);
        let logits = head.logits(&emb);
        let e = emb.shape()[1];
        let k = task.n_classes();
        // d(logit_class)/d(emb) is the class column of the head weight
        let d_emb: Vec<T> = (0..e).map(|i| head.weight.data()[i * k + class]).collect();
        let grad = self
            .backward(&trace, &Tensor::from_vec(&[1, e], d_emb), Some(idx), None)
            .expect("stop layer reached");
        let strip = |t: &Tensor<T>| t.slice_outer(0);
        Ok((strip(&trace.outputs[idx]), strip(&grad), logits))
    }
}

/// Row-wise softmax of (B, K) logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut d = softmax(logits);
    let inv_b = T::lit(1.0 / b as f64);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss + (lse - row[y]);
        let drow = &mut d.data_mut()[i * k..(i + 1) * k];
        drow[y] = drow[y] - T::one();
        for v in drow.iter_mut() {
            *v = *v * inv_b;
        }
    }
    (loss * inv_b, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::BlockConfig;

    /// Tiny topology exercising every op kind, fast enough for dense checks.
    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            input_size: (32, 32),
            stem_channels: 4,
            inception_blocks: vec![BlockConfig::uniform(1, 2), BlockConfig::uniform(2, 3)],
            embedding_dim: 5,
            ..ModelConfig::toy()
        }
    }

    fn batch<T: Scalar>(b: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
        let mut rng = seed::rng(seed);
        Tensor::from_vec(&[b, 1, h, w], (0..b * h * w).map(|_| T::lit(rng.gen_range(0.0..1.0))).collect())
    }

    #[test]
    fn toy_parameter_count() {
        let m = Model::<f32>::build(&ModelConfig::toy(), &[Task::Alteration], 1).unwrap();
        // oracle: sum over configured convolutions of weights plus gamma/beta, plus the head
        let cfg = ModelConfig::toy();
        let conv = |cin: usize, cout: usize, kk: usize| cin * cout * kk + 2 * cout;
        let [s0, s1] = cfg.stem_widths();
        let mut expect = conv(1, s0, 9) + conv(s0, s1, 9);
        let mut cin = s1;
        for b in &cfg.inception_blocks {
            let k = b.factorized_kernel;
            expect += conv(cin, b.branch_1x1, 1)
                + conv(cin, b.factorized.reduce, 1)
                + conv(b.factorized.reduce, b.factorized.out, k)
                + conv(b.factorized.out, b.factorized.out, k)
                + conv(cin, b.double_3x3.reduce, 1)
                + conv(b.double_3x3.reduce, b.double_3x3.out, 9)
                + conv(b.double_3x3.out, b.double_3x3.out, 9)
                + conv(cin, b.pool_proj, 1);
            cin = b.out_channels();
        }
        if cin != cfg.embedding_dim {
            expect += conv(cin, cfg.embedding_dim, 1);
        }
        expect += cfg.embedding_dim * 4 + 4;
        assert_eq!(m.param_count(), expect);
        assert!(m.param_count() < 500_000);
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        let a = Model::<f32>::build(&ModelConfig::toy(), &[Task::Alteration, Task::Alteration], 3).unwrap();
        let b = Model::<f32>::build(&ModelConfig::toy(), &[Task::Alteration], 3).unwrap();
        assert_eq!(a.tasks(), vec![Task::Alteration]);
        assert_eq!(a.named_tensors(), b.named_tensors());
        let c = Model::<f32>::build(&ModelConfig::toy(), &[Task::Alteration], 4).unwrap();
        assert_ne!(a.backbone_checksum(), c.backbone_checksum());
    }

    #[test]
    fn forward_shapes_and_softmax() {
        let m = Model::<f32>::build(&ModelConfig::toy(), &[Task::Alteration], 1).unwrap();
        let x = batch::<f32>(4, 128, 128, 2);
        let logits = m.forward(&x, Task::Alteration).unwrap();
        assert_eq!(logits.shape(), &[4, 4]);
        assert!(logits.all_finite());
        for row in softmax(&logits).data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(logits, m.forward(&x, Task::Alteration).unwrap());
        assert!(matches!(m.forward(&x, Task::Gender), Err(NetworkError::MissingHead(Task::Gender))));
        let wrong = batch::<f32>(1, 64, 64, 2);
        assert!(matches!(m.forward(&wrong, Task::Alteration), Err(NetworkError::ShapeMismatch(_))));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 3]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);

        // a zeroed head produces uniform logits through the full model
        let mut m = Model::<f64>::build(&micro_config(), &[Task::Alteration], 1).unwrap();
        m.param_mut("head.alteration.weight").unwrap().data_mut().fill(0.0);
        let loss = m.loss_and_grads(&batch(2, 32, 32, 1), &[0, 2], Task::Alteration).unwrap().loss;
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let m = Model::<f64>::build(&micro_config(), &[Task::Alteration], 7).unwrap();
        let x = batch::<f64>(3, 32, 32, 8);
        let labels = [0, 3, 1];
        let lg = m.loss_and_grads(&x, &labels, Task::Alteration).unwrap();
        assert_eq!(lg.grads.keys().cloned().collect::<Vec<_>>(), m.trainable_names(Task::Alteration));
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (name, g) in &lg.grads {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let mut p = m.clone();
                p.param_mut(name).unwrap().data_mut()[idx] += h;
                let up = p.loss(&x, &labels, Task::Alteration).unwrap();
                p.param_mut(name).unwrap().data_mut()[idx] -= 2.0 * h;
                let down = p.loss(&x, &labels, Task::Alteration).unwrap();
                let num = (up - down) / (2.0 * h);
                let ana = g.data()[idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn frozen_backbone_grads_only_heads() {
        let mut m = Model::<f64>::build(&micro_config(), &[Task::Gender], 1).unwrap();
        m.frozen_backbone = true;
        let lg = m.loss_and_grads(&batch(2, 32, 32, 1), &[0, 1], Task::Gender).unwrap();
        assert_eq!(
            lg.grads.keys().cloned().collect::<Vec<_>>(),
            vec!["head.gender.bias".to_string(), "head.gender.weight".to_string()]
        );
        assert!(lg.bn_stats.is_empty());
    }

    #[test]
    fn attach_head_isolated() {
        let mut m = Model::<f32>::build(&micro_config(), &[Task::Alteration], 1).unwrap();
        let x = batch::<f32>(2, 32, 32, 5);
        let before = m.forward(&x, Task::Alteration).unwrap();
        let sum = m.backbone_checksum();
        m.attach_head(Task::Gender, 9);
        let g1 = m.head(Task::Gender).unwrap().clone();
        m.attach_head(Task::Gender, 9);
        assert_eq!(&g1, m.head(Task::Gender).unwrap());
        assert_eq!(m.backbone_checksum(), sum);
        assert_eq!(m.forward(&x, Task::Alteration).unwrap(), before);
        for t in [Task::Fakeness, Task::Hand, Task::Finger] {
            m.attach_head(t, 9);
        }
        assert_eq!(m.tasks().len(), 5);
    }

    #[test]
    fn bn_stats_update_running_buffers() {
        let mut m = Model::<f64>::build(&micro_config(), &[Task::Hand], 1).unwrap();
        let lg = m.loss_and_grads(&batch(2, 32, 32, 1), &[0, 1], Task::Hand).unwrap();
        assert_eq!(lg.bn_stats.len(), m.plan.units.len());
        let sum = m.backbone_checksum();
        m.apply_bn_stats(&lg.bn_stats);
        assert_ne!(m.backbone_checksum(), sum);
        let s = &lg.bn_stats[0];
        let rm = &m.buffers()["stem.0.bn.running_mean"];
        assert!((rm.data()[0] - 0.01 * s.mean[0]).abs() < 1e-15);
    }

    #[test]
    fn layer_gradient_shapes() {
        let m = Model::<f64>::build(&micro_config(), &[Task::Alteration], 1).unwrap();
        let x = batch::<f64>(1, 32, 32, 3);
        for layer in m.layer_names().to_vec() {
            let (a, g, logits) = m.layer_gradient(&x, Task::Alteration, 1, &layer).unwrap();
            assert_eq!(a.shape(), g.shape());
            assert_eq!(logits.shape(), &[1, 4]);
        }
        assert_eq!(m.last_layer(), "embed");
        assert!(matches!(m.layer_gradient(&x, Task::Alteration, 0, "nope"), Err(NetworkError::UnknownLayer(_))));
    }

    #[test]
    fn last_layer_gradient_matches_head_weights() {
        // with global average pooling every position of map k receives W[k, c] / (h w)
        let m = Model::<f64>::build(&micro_config(), &[Task::Alteration], 2).unwrap();
        let x = batch::<f64>(1, 32, 32, 4);
        let (_, g, _) = m.layer_gradient(&x, Task::Alteration, 2, "embed").unwrap();
        let hw = (g.shape()[1] * g.shape()[2]) as f64;
        let w = &m.head(Task::Alteration).unwrap().weight;
        for k in 0..g.shape()[0] {
            let expect = w.data()[k * 4 + 2] / hw;
            assert!((g.data()[k * g.shape()[1] * g.shape()[2]] - expect).abs() < 1e-15);
        }
    }
}
