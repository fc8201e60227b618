//! Pixel, identity, age-feature, style-norm and race-feature losses and
//! their weighted sum. Every distance is a Euclidean norm per sample,
//! averaged over the batch.

use ragan_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbones::Backbones;
use crate::domain::LossWeights;
use crate::error::{RaganError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub id: f64,
    pub aging: f64,
    pub w_norm: f64,
    pub race: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(
        l2: f64,
        id: f64,
        aging: f64,
        w_norm: f64,
        race: f64,
        w: &LossWeights,
    ) -> Self {
        Self {
            l2,
            id,
            aging,
            w_norm,
            race,
            total: w.lambda_l2 * l2
                + w.lambda_id * id
                + w.lambda_w_norm * w_norm
                + w.lambda_aging * aging
                + w.lambda_race * race,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l2,
            self.id,
            self.aging,
            self.w_norm,
            self.race,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(RaganError::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Batch mean of `‖a_k − b_k‖₂`.
pub fn mean_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "distance")?;
    let d = g.sub(a, b)?;
    let n = g.sample_norm(d)?;
    Ok(g.mean(n))
}

pub fn l2_term<T: Scalar>(g: &mut Graph<T>, x: Var, x_prime: Var) -> Result<Var> {
    mean_distance(g, x, x_prime)
}

pub fn identity_term<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: Var,
    x_prime: Var,
) -> Result<Var> {
    same_shape(g, x, x_prime, "identity loss")?;
    let a = nets.identity.forward(g, ps, x)?;
    let b = nets.identity.forward(g, ps, x_prime)?;
    mean_distance(g, a, b)
}

pub fn aging_term<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: Var,
    x_prime: Var,
) -> Result<Var> {
    same_shape(g, x, x_prime, "aging loss")?;
    let a = nets.age.forward(g, ps, x)?;
    let b = nets.age.forward(g, ps, x_prime)?;
    mean_distance(g, a, b)
}

pub fn race_term<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: Var,
    x_prime: Var,
) -> Result<Var> {
    same_shape(g, x, x_prime, "race loss")?;
    let a = nets.race.forward(g, ps, x, &[])?.embedding;
    let b = nets.race.forward(g, ps, x_prime, &[])?.embedding;
    mean_distance(g, a, b)
}

/// `Σ_k ‖F_k‖_F / batch_size`.
pub fn w_norm_term<T: Scalar>(g: &mut Graph<T>, f_mix: Var, batch_size: usize) -> Result<Var> {
    if batch_size == 0 {
        return Err(RaganError::Validation(
            "batch size must be at least 1".into(),
        ));
    }
    let n = g.sample_norm(f_mix)?;
    let s = g.sum(n);
    Ok(g.scale(s, T::one() / T::from_usize(batch_size).expect("usize fits")))
}

/// Graph handles of one evaluated objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l2: Var,
    pub id: Var,
    pub aging: Var,
    pub w_norm: Var,
    pub race: Var,
    /// Weighted sum of the terms whose weight is nonzero; a zero-weight
    /// term is evaluated but never differentiated.
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, w: &LossWeights) -> LossBreakdown {
        let v = |x: Var| g.scalar(x).to_f64_lossy();
        LossBreakdown::from_terms(
            v(self.l2),
            v(self.id),
            v(self.aging),
            v(self.w_norm),
            v(self.race),
            w,
        )
    }
}

/// Builds every term comparing `x_prime` against the reference `x`.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: Var,
    x_prime: Var,
    f_mix: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let batch = g.shape(x)[0];
    let l2 = l2_term(g, x, x_prime)?;
    let id = identity_term(g, ps, nets, x, x_prime)?;
    let aging = aging_term(g, ps, nets, x, x_prime)?;
    let w_norm = w_norm_term(g, f_mix, batch)?;
    let race = race_term(g, ps, nets, x, x_prime)?;
    let mut total: Option<Var> = None;
    for (lambda, term) in [
        (w.lambda_l2, l2),
        (w.lambda_id, id),
        (w.lambda_w_norm, w_norm),
        (w.lambda_aging, aging),
        (w.lambda_race, race),
    ] {
        if lambda == 0.0 {
            continue;
        }
        let t = g.scale(term, T::from_f64_lossy(lambda));
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(LossVars {
        l2,
        id,
        aging,
        w_norm,
        race,
        total,
    })
}

fn eval<T: Scalar>(f: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let v = f(&mut g)?;
    Ok(g.scalar(v).to_f64_lossy())
}

/// Tensor-level forms of the terms, for batches `[n, ...]`.
pub fn l2_loss<T: Scalar>(x: &Tensor<T>, x_prime: &Tensor<T>) -> Result<f64> {
    eval(|g| {
        let (a, b) = (g.constant(x.clone()), g.constant(x_prime.clone()));
        l2_term(g, a, b)
    })
}

pub fn identity_loss<T: Scalar>(
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: &Tensor<T>,
    x_prime: &Tensor<T>,
) -> Result<f64> {
    eval(|g| {
        let (a, b) = (g.constant(x.clone()), g.constant(x_prime.clone()));
        identity_term(g, ps, nets, a, b)
    })
}

pub fn aging_loss<T: Scalar>(
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: &Tensor<T>,
    x_prime: &Tensor<T>,
) -> Result<f64> {
    eval(|g| {
        let (a, b) = (g.constant(x.clone()), g.constant(x_prime.clone()));
        aging_term(g, ps, nets, a, b)
    })
}

pub fn race_loss<T: Scalar>(
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: &Tensor<T>,
    x_prime: &Tensor<T>,
) -> Result<f64> {
    eval(|g| {
        let (a, b) = (g.constant(x.clone()), g.constant(x_prime.clone()));
        race_term(g, ps, nets, a, b)
    })
}

pub fn w_norm_loss<T: Scalar>(f_mix: &Tensor<T>, batch_size: usize) -> Result<f64> {
    eval(|g| {
        let f = g.constant(f_mix.clone());
        w_norm_term(g, f, batch_size)
    })
}

pub fn total_loss<T: Scalar>(
    ps: &ParamStore<T>,
    nets: &Backbones,
    x: &Tensor<T>,
    x_prime: &Tensor<T>,
    f_mix: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let (a, b, f) = (
        g.constant(x.clone()),
        g.constant(x_prime.clone()),
        g.constant(f_mix.clone()),
    );
    let vars = total_loss_graph(&mut g, ps, nets, a, b, f, w)?;
    Ok(vars.breakdown(&g, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_terms_with_default_weights() {
        let b = LossBreakdown::from_terms(1.0, 1.0, 1.0, 1.0, 1.0, &LossWeights::default());
        assert!((b.total - 8.355).abs() < 1e-12);
    }

    #[test]
    fn l2_closed_form() {
        let x = Tensor::<f64>::zeros(&[1, 3, 256, 256]);
        let y = Tensor::<f64>::ones(&[1, 3, 256, 256]);
        assert!((l2_loss(&x, &y).unwrap() - 196608f64.sqrt()).abs() < 1e-9);
        assert_eq!(l2_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn w_norm_cases() {
        assert_eq!(
            w_norm_loss(&Tensor::<f64>::zeros(&[1, 18, 512]), 1).unwrap(),
            0.0
        );
        let mut unit = Tensor::<f64>::zeros(&[1, 18, 512]);
        unit.data_mut()[5 * 512 + 7] = 1.0;
        assert_eq!(w_norm_loss(&unit, 1).unwrap(), 1.0);
        assert!(w_norm_loss(&unit, 0).is_err());
    }
}
