use crate::error::NnError;

/// Quantile levels published by the Forecast Hub.
pub const HUB_QUANTILES: [f64; 7] = [0.025, 0.1, 0.25, 0.5, 0.75, 0.9, 0.975];

fn finite(name: &str, v: &[f64]) -> Result<(), NnError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(name.into()))
    }
}

/// Mean squared residual over all elements, with its gradient.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::Shape(format!(
            "mse: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    finite("mse prediction", pred)?;
    finite("mse target", target)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn validate_quantiles(quantiles: &[f64]) -> Result<(), NnError> {
    if quantiles.is_empty() {
        return Err(NnError::Quantiles("empty".into()));
    }
    if quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(NnError::Quantiles(format!("{quantiles:?} not inside (0, 1)")));
    }
    if quantiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NnError::Quantiles(format!("{quantiles:?} not strictly increasing")));
    }
    Ok(())
}

/// Pinball loss of one Q-vector prediction, summed over quantiles.
pub fn pinball_loss(pred: &[f64], target: f64, quantiles: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    validate_quantiles(quantiles)?;
    if pred.len() != quantiles.len() {
        return Err(NnError::Shape(format!(
            "pinball: {} predictions for {} quantiles",
            pred.len(),
            quantiles.len()
        )));
    }
    finite("pinball prediction", pred)?;
    finite("pinball target", &[target])?;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(quantiles)
        .map(|(p, q)| {
            let e = target - p;
            if e > 0.0 {
                loss += q * e;
                -q
            } else {
                // kink (e == 0) takes the q − 1 branch
                loss += (q - 1.0) * e;
                1.0 - q
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Pinball loss over a B × Q batch, averaged over the batch.
pub fn pinball_loss_batch(
    pred: &[f64],
    targets: &[f64],
    quantiles: &[f64],
) -> Result<(f64, Vec<f64>), NnError> {
    let q = quantiles.len();
    if q == 0 || pred.len() != targets.len() * q || targets.is_empty() {
        return Err(NnError::Shape(format!(
            "pinball batch: {} predictions, {} targets, {} quantiles",
            pred.len(),
            targets.len(),
            q
        )));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (row, t) in pred.chunks(q).zip(targets) {
        let (l, g) = pinball_loss(row, *t, quantiles)?;
        total += l;
        grad.extend(g.into_iter().map(|v| v / n));
    }
    Ok((total / n, grad))
}
