// What the two-way regression actually averages in a staggered design.
//
// With several adoption dates the panel regression coefficient is an exact
// weighted combination of group-time contrasts — including pre-treatment
// ones. This example pulls that combination out of a staggered panel: the
// per-cell weights (post cells sum to +1, pre cells to −1), the already-
// treated comparisons the regression quietly skips, and the coefficient that
// remains once pre-treatment cells are zeroed out.

use paneldid::oracle::{builtin_fixture, simulate_sample, truth_att};
use paneldid::twfe::{fit_fe_twfe, mp_implicit_weights, FeOptions};
use paneldid::Result;

fn main() -> Result<()> {
    let dgp = builtin_fixture("staggered_3g")?;
    let truth = truth_att(&dgp)?;
    let data = simulate_sample(&dgp, 8_000, 4)?;

    let opts = FeOptions::default();
    let fit = fit_fe_twfe(&data, &opts)?;
    let mp = mp_implicit_weights(&data, &opts)?;

    println!("panel: {} units, {} periods, adoption in 2, 3, 4", data.n(), data.t_len());
    println!("regression alpha      {:+.4}", fit.alpha);
    println!("population ATT        {:+.4}\n", truth.att_overall);

    println!(
        "{:>5} {:>6} {:>5} {:>8} {:>10} {:>8}",
        "group", "period", "post", "weight", "contrib", "skipped"
    );
    for c in &mp.cells {
        println!(
            "{:>5} {:>6} {:>5} {:>8.4} {:>10.4} {:>8}",
            c.group,
            c.period,
            if c.post { "yes" } else { "" },
            c.weight,
            c.contribution,
            if c.comparison_skipped { "some" } else { "" }
        );
    }

    println!();
    println!("post-cell weights sum {:+.6} (exact +1)", mp.post_weight_sum());
    println!("pre-cell weights sum  {:+.6} (exact -1)", mp.pre_weight_sum());
    println!("remainder             {:+.1e}  (alpha minus the cell sum)", mp.remainder);
    println!();
    println!(
        "alpha with pre-treatment cells zeroed: {:+.4}; the gap to alpha\n\
         ({:+.4}) is what pre-period contrasts contribute to the coefficient",
        mp.alpha_pre_zeroed,
        fit.alpha - mp.alpha_pre_zeroed
    );
    for w in &mp.warnings {
        println!("note: {w}");
    }
    Ok(())
}
