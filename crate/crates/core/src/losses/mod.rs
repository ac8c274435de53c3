//! Relativistic average least-squares adversarial losses, cycle and
//! identity L1 terms, and the weighted generator objective.

use crate::error::{Error, Result};
use crate::models::DiscriminatorScores;
use crate::numerics::{Graph, Var};

pub const LAMBDA_CYCLE: f32 = 5.0;
pub const LAMBDA_ID: f32 = 10.0;

fn check_scores(g: &Graph, real: Var, fake: Var) -> Result<()> {
    for (name, v) in [("real", real), ("fake", fake)] {
        if g.value(v).numel() == 0 || g.shape(v).len() != 1 {
            return Err(Error::shape("rals", format!("{name} scores must be a non-empty vector, got {:?}", g.shape(v))));
        }
    }
    Ok(())
}

/// `mean((a − mean(b) − 1)²) + mean((b − mean(a) + 1)²)`.
fn relativistic(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_scores(g, a, b)?;
    let (ma, mb) = (g.mean_all(a), g.mean_all(b));
    let da = g.sub_scalar(a, mb)?;
    let da = g.add_const(da, -1.0);
    let da = g.square(da);
    let la = g.mean_all(da);
    let db = g.sub_scalar(b, ma)?;
    let db = g.add_const(db, 1.0);
    let db = g.square(db);
    let lb = g.mean_all(db);
    g.add(la, lb)
}

/// Discriminator objective: real scores pushed above the mean fake score
/// by 1, fake scores below the mean real score by 1.
pub fn rals_discriminator_loss(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    relativistic(g, real, fake)
}

/// Generator objective: the discriminator objective with roles swapped.
pub fn rals_generator_loss(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    relativistic(g, fake, real)
}

fn average_heads(
    g: &mut Graph,
    real: DiscriminatorScores,
    fake: DiscriminatorScores,
    f: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let a = f(g, real.final_score, fake.final_score)?;
    let b = f(g, real.mid_score, fake.mid_score)?;
    let s = g.add(a, b)?;
    Ok(g.mul_const(s, 0.5))
}

/// [`rals_discriminator_loss`] averaged over both discriminator heads.
pub fn multiscale_discriminator_loss(g: &mut Graph, real: DiscriminatorScores, fake: DiscriminatorScores) -> Result<Var> {
    average_heads(g, real, fake, rals_discriminator_loss)
}

/// [`rals_generator_loss`] averaged over both discriminator heads.
pub fn multiscale_generator_loss(g: &mut Graph, real: DiscriminatorScores, fake: DiscriminatorScores) -> Result<Var> {
    average_heads(g, real, fake, rals_generator_loss)
}

/// Mean absolute difference over all elements.
pub fn mean_abs_error(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

/// `mae(F(G(x)), x) + mae(G(F(y)), y)`.
pub fn cycle_loss(g: &mut Graph, x: Var, f_of_g_x: Var, y: Var, g_of_f_y: Var) -> Result<Var> {
    let a = mean_abs_error(g, f_of_g_x, x)?;
    let b = mean_abs_error(g, g_of_f_y, y)?;
    g.add(a, b)
}

/// `mae(F(x), x) + mae(G(y), y)`.
pub fn identity_loss(g: &mut Graph, x: Var, f_of_x: Var, y: Var, g_of_y: Var) -> Result<Var> {
    let a = mean_abs_error(g, f_of_x, x)?;
    let b = mean_abs_error(g, g_of_y, y)?;
    g.add(a, b)
}

/// Generator-side loss terms, each a one-element node.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub rals_xy: Var,
    pub rals_yx: Var,
    pub cycle: Var,
    pub identity: Var,
}

/// `rals_xy + rals_yx + λ_cycle·cycle + λ_id·identity`, the last term only
/// when `identity_active`.
pub fn total_generator_loss(g: &mut Graph, t: GeneratorTerms, lambda_cycle: f32, lambda_id: f32, identity_active: bool) -> Result<Var> {
    let adv = g.add(t.rals_xy, t.rals_yx)?;
    let cyc = g.mul_const(t.cycle, lambda_cycle);
    let mut total = g.add(adv, cyc)?;
    if identity_active {
        let id = g.mul_const(t.identity, lambda_id);
        total = g.add(total, id)?;
    }
    Ok(total)
}

/// Scalar loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rals_g_xy: f64,
    pub rals_g_yx: f64,
    pub rals_d_x: f64,
    pub rals_d_y: f64,
    pub cycle: f64,
    pub identity: f64,
    pub total_g: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 7] = ["rals_g_xy", "rals_g_yx", "rals_d_x", "rals_d_y", "cycle", "identity", "total_g"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.rals_g_xy,
            self.rals_g_yx,
            self.rals_d_x,
            self.rals_d_y,
            self.cycle,
            self.identity,
            self.total_g,
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn vec_var(g: &mut Graph, v: &[f32]) -> Var {
        g.constant(Tensor::new(&[v.len()], v.to_vec()).unwrap())
    }

    fn d_loss(real: &[f32], fake: &[f32]) -> f32 {
        let mut g = Graph::new();
        let (r, f) = (vec_var(&mut g, real), vec_var(&mut g, fake));
        let l = rals_discriminator_loss(&mut g, r, f).unwrap();
        g.value(l).item()
    }

    fn g_loss(real: &[f32], fake: &[f32]) -> f32 {
        let mut g = Graph::new();
        let (r, f) = (vec_var(&mut g, real), vec_var(&mut g, fake));
        let l = rals_generator_loss(&mut g, r, f).unwrap();
        g.value(l).item()
    }

    #[test]
    fn discriminator_fixed_points() {
        assert_eq!(d_loss(&[1.0; 4], &[0.0; 4]), 0.0);
        assert_eq!(d_loss(&[0.3; 4], &[0.3; 4]), 2.0);
        assert_eq!(d_loss(&[0.0; 4], &[1.0; 4]), 8.0);
    }

    #[test]
    fn generator_fixed_points() {
        assert_eq!(g_loss(&[0.0; 3], &[1.0; 3]), 0.0);
        assert_eq!(g_loss(&[-2.0; 3], &[-2.0; 3]), 2.0);
        assert_eq!(g_loss(&[1.0; 3], &[0.0; 3]), 8.0);
    }

    #[test]
    fn swapping_roles_exchanges_objectives() {
        let (a, b) = ([0.2, -1.3, 0.7], [1.1, 0.4, -0.6]);
        assert_eq!(d_loss(&a, &b), g_loss(&b, &a));
        assert_eq!(g_loss(&a, &b), d_loss(&b, &a));
    }

    #[test]
    fn empty_scores_are_rejected() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::zeros(&[1, 2]));
        let f = vec_var(&mut g, &[0.0]);
        assert!(rals_discriminator_loss(&mut g, r, f).is_err());
    }

    #[test]
    fn cycle_and_identity_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let x_off = g.add_const(x, 0.5);
        let l = cycle_loss(&mut g, x, x, x, x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = cycle_loss(&mut g, x, x_off, x, x).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        let x1 = g.add_const(x, 1.0);
        let l = identity_loss(&mut g, x, x1, x, x).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(cycle_loss(&mut g, x, bad, x, x).is_err());
    }

    #[test]
    fn total_weighting() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let t = GeneratorTerms {
            rals_xy: one,
            rals_yx: one,
            cycle: one,
            identity: one,
        };
        let on = total_generator_loss(&mut g, t, LAMBDA_CYCLE, LAMBDA_ID, true).unwrap();
        let off = total_generator_loss(&mut g, t, LAMBDA_CYCLE, LAMBDA_ID, false).unwrap();
        let none = total_generator_loss(&mut g, t, 0.0, 0.0, true).unwrap();
        assert_eq!(g.value(on).item(), 17.0);
        assert_eq!(g.value(off).item(), 7.0);
        assert_eq!(g.value(none).item(), 2.0);
    }

    #[test]
    fn breakdown_reports_non_finite_component() {
        let mut b = LossBreakdown::default();
        assert_eq!(b.first_non_finite(), None);
        b.cycle = f64::NAN;
        assert_eq!(b.first_non_finite(), Some("cycle"));
    }
}
