#![allow(dead_code)]

use serde::Deserialize;
use syngrid_core::grammar::parse_command;
use syngrid_core::syntax::{mask_from_dependency, parse_dependency};

#[derive(Debug, Deserialize)]
pub struct TreeFixture {
    pub command: String,
    pub heads: Vec<i64>,
    pub labels: Vec<String>,
}

pub fn tree_fixtures() -> Vec<TreeFixture> {
    serde_json::from_str(include_str!("../fixtures/dependency_trees.json")).expect("fixture file parses")
}

/// Compares the parser's output with one fixture, describing the first difference.
pub fn check_fixture(fx: &TreeFixture) -> Result<(), String> {
    let (ast, tokens) = parse_command(&fx.command).map_err(|e| e.to_string())?;
    let tree = parse_dependency(&ast, &tokens).map_err(|e| e.to_string())?;
    if tree.heads_as_i64() != fx.heads {
        return Err(format!("{:?}: heads {:?}, expected {:?}", fx.command, tree.heads_as_i64(), fx.heads));
    }
    let labels: Vec<String> = serde_json::to_value(tree.labels())
        .map_err(|e| e.to_string())?
        .as_array()
        .map(|a| a.iter().map(|v| v.as_str().unwrap_or_default().to_string()).collect())
        .unwrap_or_default();
    if labels != fx.labels {
        return Err(format!("{:?}: labels {:?}, expected {:?}", fx.command, labels, fx.labels));
    }
    let mask = mask_from_dependency(&tree);
    let n = tokens.len();
    if !mask.is_symmetric() || !mask.diagonal_all_true() || mask.off_diagonal_count() != 2 * (n - 1) {
        return Err(format!("{:?}: mask violates the tree-mask invariants", fx.command));
    }
    Ok(())
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syngrid_core::dataset::{generate_corpus, Episode};
use syngrid_core::model::{action_ids, Forward, Model, ModelConfig, ModelInput};
use syngrid_core::tensor::{Graph, Tensor, TensorError, Var};

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One autodiff op wired into a scalar loss for finite differencing.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Like [`random_tensor`] but with every entry at least 0.1 away from zero.
pub fn away_from_zero(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut t = random_tensor(shape, seed);
    for x in t.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static) -> OpCase {
    OpCase { name, inputs, build: Box::new(build) }
}

pub fn op_cases() -> Vec<OpCase> {
    let r = random_tensor;
    let mask = vec![true, false, true, true, true, true, false, false, true, false, true, true];
    vec![
        case("add", vec![r(vec![3, 4], 1), r(vec![3, 4], 2)], |g, v| g.add(v[0], v[1])),
        case("add_row", vec![r(vec![3, 4], 3), r(vec![4], 4)], |g, v| g.add_row(v[0], v[1])),
        case("mul", vec![r(vec![3, 4], 5), r(vec![3, 4], 6)], |g, v| g.mul(v[0], v[1])),
        case("mul_row", vec![r(vec![3, 4], 7), r(vec![4], 8)], |g, v| g.mul_row(v[0], v[1])),
        case("scale", vec![r(vec![2, 3], 9)], |g, v| Ok(g.scale(v[0], -1.7))),
        case("matmul", vec![r(vec![3, 5], 10), r(vec![5, 2], 11)], |g, v| g.matmul(v[0], v[1])),
        case("transpose", vec![r(vec![3, 5], 12)], |g, v| g.transpose(v[0])),
        case("reshape", vec![r(vec![3, 4], 13)], |g, v| g.reshape(v[0], vec![2, 6])),
        case("concat_rows", vec![r(vec![2, 3], 14), r(vec![4, 3], 15)], |g, v| g.concat(&[v[0], v[1]], 0)),
        case("concat_cols", vec![r(vec![3, 2], 16), r(vec![3, 4], 17)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("slice_rows", vec![r(vec![5, 3], 18)], |g, v| g.slice(v[0], 0, 1, 4)),
        case("slice_cols", vec![r(vec![3, 5], 19)], |g, v| g.slice(v[0], 1, 2, 5)),
        case("embedding_gather", vec![r(vec![6, 4], 20)], |g, v| g.embedding_gather(v[0], &[2, 0, 2, 5])),
        case("relu", vec![away_from_zero(vec![3, 4], 21)], |g, v| Ok(g.relu(v[0]))),
        case("dropout", vec![r(vec![4, 5], 22)], |g, v| Ok(g.dropout(v[0], 0.3, 99))),
        case("layernorm", vec![r(vec![3, 6], 23)], |g, v| Ok(g.layernorm(v[0], 1e-5))),
        case("softmax", vec![r(vec![3, 4], 24)], |g, v| Ok(g.softmax_lastdim(v[0]))),
        case("masked_softmax", vec![r(vec![3, 4], 25)], move |g, v| g.masked_softmax(v[0], &mask)),
        case("cross_entropy", vec![r(vec![4, 5], 26)], |g, v| g.cross_entropy(v[0], &[1, 4, 3, 0], 3)),
        case("sum", vec![r(vec![2, 3], 27)], |g, v| Ok(g.sum(v[0]))),
    ]
}

/// `sum(out * w)` for a fixed pseudo-random `w`, so every output element
/// gets a distinct upstream gradient.
fn weighted_loss(g: &mut Graph<f64>, out: Var) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(random_tensor(shape, 1234));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval_case(c: &OpCase, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>), TensorError> {
    let mut g = Graph::new().with_training(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (c.build)(&mut g, &vars)?;
    let loss = weighted_loss(&mut g, out)?;
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()])).collect();
    Ok((value, grads))
}

pub const FD_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gradients
/// over every input element of an op.
pub fn fd_check_op(c: &OpCase) -> Result<f64, TensorError> {
    let (_, grads) = eval_case(c, &c.inputs)?;
    let mut worst = 0.0f64;
    for (k, input) in c.inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = c.inputs.clone();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = c.inputs.clone();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval_case(c, &plus)?.0 - eval_case(c, &minus)?.0) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads[k][e], numeric));
        }
    }
    Ok(worst)
}

/// d_model 16, 2 heads, 2 encoder and 2 decoder layers, no dropout.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_hidden: 32,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// d_model 32, 4 heads, 2 shared encoder layers.
pub fn mini_config(dropout: f64) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        d_hidden: 64,
        n_heads: 4,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        dropout,
        ..ModelConfig::default()
    }
}

pub fn batch_inputs(episodes: &[Episode], cfg: &ModelConfig) -> Vec<(ModelInput, Vec<usize>)> {
    episodes
        .iter()
        .map(|ep| (ModelInput::from_episode(ep, cfg.mask_source).unwrap(), action_ids(&ep.actions.actions)))
        .collect()
}

/// Batch loss and per-parameter gradients of a model.
pub fn loss_and_grads(model: &Model<f64>, batch: &[(ModelInput, Vec<usize>)]) -> (f64, Vec<Option<Vec<f64>>>) {
    let pairs: Vec<(&ModelInput, &[usize])> = batch.iter().map(|(i, a)| (i, a.as_slice())).collect();
    let mut fwd = Forward::new(model, false, 0);
    let loss = fwd.batch_loss(&pairs).unwrap();
    let value = fwd.graph.value(loss).data()[0];
    fwd.graph.backward(loss).unwrap();
    (value, fwd.grads())
}

pub fn loss_only(model: &Model<f64>, batch: &[(ModelInput, Vec<usize>)]) -> f64 {
    let pairs: Vec<(&ModelInput, &[usize])> = batch.iter().map(|(i, a)| (i, a.as_slice())).collect();
    let mut fwd = Forward::new(model, false, 0);
    let loss = fwd.batch_loss(&pairs).unwrap();
    fwd.graph.value(loss).data()[0]
}

/// Central-difference check of the full model loss on a 2-episode batch.
/// Checks `per_param` elements of every parameter tensor; returns the
/// worst relative error and the number of elements checked.
pub fn fd_check_model(per_param: usize) -> (f64, usize) {
    let cfg = tiny_config();
    let model = Model::<f64>::new(cfg.clone(), 5).unwrap();
    let episodes = generate_corpus(31, 2, 2).unwrap();
    let batch = batch_inputs(&episodes, &cfg);
    let (_, grads) = loss_and_grads(&model, &batch);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, p) in model.params().iter().enumerate() {
        let n = p.tensor.len();
        for _ in 0..per_param.min(n) {
            let e = rng.random_range(0..n);
            let analytic = grads[pi].as_ref().map_or(0.0, |g| g[e]);
            let mut plus = model.clone();
            plus.params_mut().iter_mut().nth(pi).unwrap().tensor.data_mut()[e] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut().iter_mut().nth(pi).unwrap().tensor.data_mut()[e] -= FD_STEP;
            let numeric = (loss_only(&plus, &batch) - loss_only(&minus, &batch)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
