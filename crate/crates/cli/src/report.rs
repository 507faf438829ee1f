//! Summary tables: per-group throughput statistics and paired relative
//! improvement over the random-assignment baseline.

use std::collections::BTreeMap;
use std::io::Write;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sortflow_core::files::TrialRecord;

/// Group key: policy, demand estimate (stringified to stay Ord), fleet size.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupKey {
    pub policy: String,
    pub lambda: Option<String>,
    pub robots: u32,
}

impl GroupKey {
    fn of(record: &TrialRecord) -> GroupKey {
        GroupKey {
            policy: record.policy.clone(),
            lambda: record.lambda.map(|l| format!("{l}")),
            robots: record.robots,
        }
    }

    pub fn label(&self) -> String {
        match &self.lambda {
            Some(l) => format!("{} (lambda={l})", self.policy),
            None => self.policy.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupStats {
    pub key: GroupKey,
    pub trials: usize,
    pub flagged: usize,
    pub max: f64,
    pub q75: f64,
    pub median: f64,
    pub q25: f64,
    pub min: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile on a sorted sample.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Group records and compute Table-style statistics on throughput. Flagged
/// trials are excluded unless `include_flagged`; their count is always
/// reported. Empty groups produce a warning and are dropped.
pub fn group_stats(records: &[TrialRecord], include_flagged: bool) -> Vec<GroupStats> {
    let mut groups: BTreeMap<GroupKey, Vec<&TrialRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(GroupKey::of(record)).or_default().push(record);
    }
    let mut out = Vec::new();
    for (key, members) in groups {
        let flagged = members.iter().filter(|r| r.flagged).count();
        let mut values: Vec<f64> = members
            .iter()
            .filter(|r| include_flagged || !r.flagged)
            .map(|r| r.throughput)
            .collect();
        if values.is_empty() {
            eprintln!("warning: group {} R={} is empty after filtering", key.label(), key.robots);
            continue;
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        out.push(GroupStats {
            trials: values.len(),
            flagged,
            max: *values.last().unwrap(),
            q75: quantile(&values, 0.75),
            median: quantile(&values, 0.5),
            q25: quantile(&values, 0.25),
            min: values[0],
            mean,
            key,
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct Improvement {
    pub key: GroupKey,
    pub pairs: usize,
    pub mean_pct: f64,
    pub min_pct: f64,
    pub max_pct: f64,
}

/// For every non-baseline group, pair each trial with a uniformly drawn
/// baseline trial at the same fleet size and report the relative throughput
/// improvement percentages.
pub fn paired_improvements(
    records: &[TrialRecord],
    baseline_policy: &str,
    include_flagged: bool,
    seed: u64,
) -> Vec<Improvement> {
    let keep = |r: &&TrialRecord| include_flagged || !r.flagged;
    let mut baselines: BTreeMap<u32, Vec<&TrialRecord>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.policy == baseline_policy).filter(keep) {
        baselines.entry(record.robots).or_default().push(record);
    }
    let mut groups: BTreeMap<GroupKey, Vec<&TrialRecord>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.policy != baseline_policy).filter(keep) {
        groups.entry(GroupKey::of(record)).or_default().push(record);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (key, members) in groups {
        let pool = match baselines.get(&key.robots) {
            Some(pool) if !pool.is_empty() => pool,
            _ => {
                eprintln!(
                    "warning: no {baseline_policy} baseline at R={} to pair against",
                    key.robots
                );
                continue;
            }
        };
        let mut pcts = Vec::with_capacity(members.len());
        for member in &members {
            let partner = pool[rng.gen_range(0..pool.len())];
            pcts.push((member.throughput - partner.throughput) / partner.throughput * 100.0);
        }
        let mean = pcts.iter().sum::<f64>() / pcts.len() as f64;
        out.push(Improvement {
            key,
            pairs: pcts.len(),
            mean_pct: mean,
            min_pct: pcts.iter().copied().fold(f64::INFINITY, f64::min),
            max_pct: pcts.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    out
}

pub fn write_stats_csv(stats: &[GroupStats], mut w: impl Write) -> Result<()> {
    writeln!(w, "policy,lambda,robots,trials,flagged,max,q75,median,q25,min,mean")?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.key.policy,
            s.key.lambda.as_deref().unwrap_or(""),
            s.key.robots,
            s.trials,
            s.flagged,
            s.max,
            s.q75,
            s.median,
            s.q25,
            s.min,
            s.mean
        )?;
    }
    Ok(())
}

pub fn write_improvements_csv(improvements: &[Improvement], mut w: impl Write) -> Result<()> {
    writeln!(w, "policy,lambda,robots,pairs,mean_pct,min_pct,max_pct")?;
    for imp in improvements {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            imp.key.policy,
            imp.key.lambda.as_deref().unwrap_or(""),
            imp.key.robots,
            imp.pairs,
            imp.mean_pct,
            imp.min_pct,
            imp.max_pct
        )?;
    }
    Ok(())
}

pub fn print_tables(stats: &[GroupStats], improvements: &[Improvement]) {
    println!(
        "{:<24} {:>3} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "group", "R", "trials", "flagged", "max", "q75", "median", "q25", "min", "mean"
    );
    for s in stats {
        println!(
            "{:<24} {:>3} {:>7} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            s.key.label(),
            s.key.robots,
            s.trials,
            s.flagged,
            s.max,
            s.q75,
            s.median,
            s.q25,
            s.min,
            s.mean
        );
    }
    if !improvements.is_empty() {
        println!();
        println!(
            "{:<24} {:>3} {:>6} {:>10} {:>10} {:>10}",
            "improvement vs random", "R", "pairs", "mean %", "min %", "max %"
        );
        for imp in improvements {
            println!(
                "{:<24} {:>3} {:>6} {:>10.2} {:>10.2} {:>10.2}",
                imp.key.label(),
                imp.key.robots,
                imp.pairs,
                imp.mean_pct,
                imp.min_pct,
                imp.max_pct
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(policy: &str, robots: u32, trial: u32, throughput: f64, flagged: bool) -> TrialRecord {
        TrialRecord {
            config_hash: "h".into(),
            policy: policy.into(),
            lambda: if policy == "flow" { Some(0.1) } else { None },
            robots,
            trial,
            seed: trial as u64,
            ticks: 3000,
            warmup_ticks: 300,
            throughput,
            drops: (throughput * 2700.0) as u64,
            mean_trip_time: 40.0,
            deadlock_events: 0,
            unresolved_deadlocks: 0,
            flagged,
        }
    }

    #[test]
    fn stats_on_synthetic_records() {
        let records =
            vec![record("random", 20, 0, 0.2, false), record("random", 20, 1, 0.3, false), record("random", 20, 2, 0.4, false)];
        let stats = group_stats(&records, false);
        assert_eq!(stats.len(), 1);
        assert!((stats[0].median - 0.3).abs() < 1e-12);
        assert!((stats[0].mean - 0.3).abs() < 1e-12);
        assert_eq!(stats[0].max, 0.4);
        assert_eq!(stats[0].min, 0.2);
    }

    #[test]
    fn single_record_group_mean_is_the_value() {
        let records = vec![record("zoning", 10, 0, 0.25, false)];
        let stats = group_stats(&records, false);
        assert_eq!(stats[0].mean, 0.25);
        assert_eq!(stats[0].median, 0.25);
    }

    #[test]
    fn flagged_records_excluded_by_default() {
        let records = vec![
            record("random", 20, 0, 0.3, false),
            record("random", 20, 1, 0.05, true),
        ];
        let stats = group_stats(&records, false);
        assert_eq!(stats[0].trials, 1);
        assert_eq!(stats[0].flagged, 1);
        assert_eq!(stats[0].mean, 0.3);
        let with = group_stats(&records, true);
        assert_eq!(with[0].trials, 2);
    }

    #[test]
    fn known_gap_reports_ten_percent() {
        // Constant groups: pairing noise vanishes and the gap is exact.
        let mut records = Vec::new();
        for t in 0..10 {
            records.push(record("flow", 20, t, 0.33, false));
            records.push(record("random", 20, t, 0.30, false));
        }
        let improvements = paired_improvements(&records, "random", false, 7);
        assert_eq!(improvements.len(), 1);
        assert!((improvements[0].mean_pct - 10.0).abs() < 1e-9);
    }
}
