//! Shared finite-difference driver for gradient tests.
//!
//! Central differences with step `h` on f32 storage; agreement is judged
//! per component against the infinity norm of the larger gradient vector,
//! so one noisy component near a kink cannot hide a systematically wrong
//! backward pass, and tiny components are not amplified.

pub fn fd_max_rel<S>(
    state: &mut S,
    components: usize,
    read: &dyn Fn(&S, usize) -> f32,
    write: &dyn Fn(&mut S, usize, f32),
    loss: &dyn Fn(&S) -> f64,
    analytic: &[f64],
    h: f32,
) -> f64 {
    assert_eq!(analytic.len(), components);
    assert!(components > 0);
    let mut numeric = vec![0.0f64; components];
    for i in 0..components {
        let orig = read(state, i);
        write(state, i, orig + h);
        let plus = loss(state);
        write(state, i, orig - h);
        let minus = loss(state);
        write(state, i, orig);
        numeric[i] = (plus - minus) / (2.0 * h as f64);
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let denom = inf(analytic).max(inf(&numeric)).max(1e-6);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / denom)
        .fold(0.0f64, f64::max)
}
