use splap_core::cli_io::{parse_config_str, run_pipeline, RunReport};
use splap_core::problem_def::C0Branch;

fn run(h: f64, head: &str, problem: &str) -> RunReport {
    let text = format!("{head}\n[domain]\nh = {h}\n[problem]\ngamma = 0.5\n{problem}\n");
    let rep = run_pipeline(&parse_config_str(&text).unwrap()).unwrap();
    assert!(rep.passed(), "{:?}: {:?}", rep.outcome, rep.gates);
    rep
}

#[test]
fn strong_residual_shrinks_linearly_for_p_two() {
    let p90: Vec<f64> = [0.125, 0.0625, 0.03125]
        .iter()
        .map(|&h| {
            let rep = run(h, "validation_mode = true", "p = 2\nf = \"s^(-0.5)\"\ng = \"0.5\"");
            rep.strong_residual.unwrap().percentile90
        })
        .collect();
    for w in p90.windows(2) {
        let rate = (w[0] / w[1]).log2();
        assert!(rate >= 0.9, "p90 {p90:?}");
    }
}

#[test]
fn truncated_singular_reaction_stays_above_subsolution() {
    let rep = run(
        0.0625,
        "",
        "p = 1.5\nf = \"lambda1/2*min(s,1)^(p-1) + s^(-0.5)\"\ng = \"0.3\"",
    );
    let trace = rep.trace.unwrap();
    let tol = rep.config.tolerances.outer;
    for r in &trace.records {
        assert!(r.residual_norm <= tol, "{}", r.residual_norm);
        assert!(r.comparison_margin >= -1e-8, "{}", r.comparison_margin);
    }
}

#[test]
fn constant_convection_takes_the_g_branch() {
    let rep = run(0.0625, "", "p = 1.5\nf = \"0.5*s^0.5\"\ng = \"1\"");
    let sub = rep.subsolution.unwrap();
    assert_eq!(sub.summary.branch, C0Branch::GBranch);
    assert_eq!(sub.summary.delta, 0.99);
    let lambda1 = rep.eigenpair.unwrap().lambda1;
    // λ₁ ū^{p−1} ≤ θ
    assert!(lambda1 * sub.summary.sup_norm.powf(0.5) <= sub.summary.theta);
}

#[test]
fn continuous_reactions_are_bracketed() {
    let rep = run(
        0.125,
        "",
        "p = 1.5\nf = \"s^(-0.5) + 0.1*s^0.5\"\ng = \"0.5 + 0.1*exp(-(xi1^2 + xi2^2))\"",
    );
    let s = rep.strong_solution.unwrap();
    assert!(s.bracket_violations <= 0.01, "{}", s.bracket_violations);
    assert_eq!(s.discontinuity_zone_fraction, 0.0);
}
