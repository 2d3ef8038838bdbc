// Group-time effects, aggregated two ways, with bootstrap uncertainty.
//
// Instead of one pooled coefficient, estimate ATT(g,t) cell by cell against
// never-treated units, then aggregate: a group-share-weighted overall ATT and
// an event-study path in time-since-adoption. Pre-treatment cells double as
// placebo checks. Standard errors come from a cluster bootstrap over units,
// run jointly so every cell and every aggregate is resampled consistently.

use paneldid::drdid::{
    aggregate_event_study, aggregate_overall, att_gt_aipw, bootstrap_se, CovMode, CovariateSpec,
    ComparisonGroup, DrOptions,
};
use paneldid::oracle::{builtin_fixture, simulate_sample, truth_att};
use paneldid::Result;

fn main() -> Result<()> {
    let dgp = builtin_fixture("staggered_3g")?;
    let truth = truth_att(&dgp)?;
    let data = simulate_sample(&dgp, 4_000, 9)?;

    let spec = CovariateSpec {
        mode: CovMode::DeltaPlusBase,
        include_ti: true,
        interactions: vec![],
        propensity_mode: None,
    };
    let opts = DrOptions {
        comparison: ComparisonGroup::NeverTreated,
        anticipation: 0,
        trim: false,
        min_group_size: 0,
        ridge: 0.0,
    };

    // every treated group crossed with every period except its base period
    let periods = data.periods().to_vec();
    let mut grid = Vec::new();
    for &g_idx in &data.treated_groups() {
        for &t in &periods {
            if t != periods[g_idx - 1] {
                grid.push((periods[g_idx], t));
            }
        }
    }

    let run = |d: &paneldid::panel::PanelDataset| -> Result<Vec<f64>> {
        let mut cells = Vec::with_capacity(grid.len());
        for &(g, t) in &grid {
            cells.push(att_gt_aipw(d, &spec, g, t, &opts)?);
        }
        let overall = aggregate_overall(&cells, d)?;
        let es = aggregate_event_study(&cells, d)?;
        let mut v: Vec<f64> = cells.iter().map(|c| c.att).collect();
        v.push(overall.values[0].estimate);
        v.extend(es.values.iter().map(|x| x.estimate));
        Ok(v)
    };

    // point estimates on the full sample
    let mut cells = Vec::with_capacity(grid.len());
    for &(g, t) in &grid {
        cells.push(att_gt_aipw(&data, &spec, g, t, &opts)?);
    }
    let overall = aggregate_overall(&cells, &data)?;
    let es = aggregate_event_study(&cells, &data)?;

    let boot = bootstrap_se(&data, 60, 42, run)?;
    println!("cluster bootstrap: {} replicates, {} failed\n", boot.reps, boot.failed);

    let true_gt = |g: i64, t: i64| {
        truth
            .att_gt
            .iter()
            .find(|(tg, tt, _)| *tg == g && *tt == t)
            .map(|(_, _, v)| *v)
    };
    println!("{:>5} {:>6} {:>9} {:>7} {:>9}", "group", "period", "att", "se", "truth");
    for (i, c) in cells.iter().enumerate() {
        let tr = true_gt(c.group, c.period);
        println!(
            "{:>5} {:>6} {:>9.4} {:>7.4} {:>9}",
            c.group,
            c.period,
            c.att,
            boot.se[i],
            tr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "pre".into())
        );
    }

    println!();
    let o = &overall.values[0];
    println!(
        "overall ATT {:+.4} (se {:.4}), population value {:+.4}",
        o.estimate,
        boot.se[grid.len()],
        truth.att_overall
    );
    println!("\nevent study (time since adoption):");
    for (j, v) in es.values.iter().enumerate() {
        println!(
            "  e = {:>3}   {:+.4} (se {:.4})",
            v.label,
            v.estimate,
            boot.se[grid.len() + 1 + j]
        );
    }
    Ok(())
}
