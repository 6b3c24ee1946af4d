//! Node-wise two-layer perceptron: the GCN with propagation removed.
//!
//! This path never touches an adjacency matrix. It shares initialization,
//! dropout masks and the optimizer with [`crate::gcn`], so training it and
//! training a GCN on an edgeless graph (Â = I) must agree bit for bit.

use ndarray::{Array2, ArrayView2, Zip};

use crate::gcn::{
    epoch_dropout_seed, init_model, logit_gradient, masked_loss, relu, softmax_rows, Adam, DropoutMasks, GcnError, GcnModel,
    Gradients, Mode, TrainConfig, TrainedGcn,
};

struct MlpPass {
    masks: Option<DropoutMasks>,
    dropped_input: Array2<f64>,
    pre_activation: Array2<f64>,
    dropped_hidden: Array2<f64>,
    probabilities: Array2<f64>,
}

fn mlp_pass(model: &GcnModel, x: ArrayView2<'_, f64>, mode: Mode) -> MlpPass {
    let masks = match mode {
        Mode::Deterministic => None,
        Mode::Stochastic(s) => Some(DropoutMasks::sample(s, x.nrows(), model.feature_dim(), model.hidden_dim(), model.dropout_rate)),
    };
    let dropped_input = match &masks {
        Some(m) => &x * &m.input,
        None => x.to_owned(),
    };
    let pre_activation = dropped_input.dot(&model.w0);
    let hidden = pre_activation.mapv(relu);
    let dropped_hidden = match &masks {
        Some(m) => &hidden * &m.hidden,
        None => hidden,
    };
    let probabilities = softmax_rows(&dropped_hidden.dot(&model.w1));
    MlpPass { masks, dropped_input, pre_activation, dropped_hidden, probabilities }
}

pub fn mlp_forward(model: &GcnModel, x: ArrayView2<'_, f64>, mode: Mode) -> Array2<f64> {
    mlp_pass(model, x, mode).probabilities
}

fn mlp_gradients(model: &GcnModel, pass: &MlpPass, labels: &[usize], mask: &[bool], weight_decay: f64) -> Result<Gradients, GcnError> {
    let d_logits = logit_gradient(&pass.probabilities, labels, mask)?;
    let w1 = pass.dropped_hidden.t().dot(&d_logits);
    let mut d_hidden = d_logits.dot(&model.w1.t());
    if let Some(m) = &pass.masks {
        d_hidden *= &m.hidden;
    }
    Zip::from(&mut d_hidden).and(&pass.pre_activation).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let mut w0 = pass.dropped_input.t().dot(&d_hidden);
    if weight_decay != 0.0 {
        w0.scaled_add(weight_decay, &model.w0);
    }
    Ok(Gradients { w0, w1 })
}

pub fn train_mlp(x: ArrayView2<'_, f64>, labels: &[usize], train_mask: &[bool], cfg: &TrainConfig) -> Result<TrainedGcn, GcnError> {
    cfg.validate()?;
    let mut model = init_model(x.ncols(), cfg);
    let mut adam = Adam::new(cfg.learning_rate, &[model.w0.dim(), model.w1.dim()]);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pass = mlp_pass(&model, x, Mode::Stochastic(epoch_dropout_seed(cfg, epoch)));
        history.push(masked_loss(&pass.probabilities, labels, train_mask, &model.w0, cfg.weight_decay)?);
        let g = mlp_gradients(&model, &pass, labels, train_mask, cfg.weight_decay)?;
        adam.update(&mut [&mut model.w0, &mut model.w1], &[&g.w0, &g.w1]);
    }
    Ok(TrainedGcn { model, loss_history: history })
}
