//! Weight distributions per parameter group.

use karat_core::checkpoint::Checkpoint;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Attention,
    Karat,
    Mlp,
    Other,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Attention, Group::Karat, Group::Mlp, Group::Other];

    pub fn name(self) -> &'static str {
        match self {
            Group::Attention => "attention",
            Group::Karat => "karat",
            Group::Mlp => "mlp",
            Group::Other => "other",
        }
    }

    /// Classifies a parameter by its checkpoint name.
    pub fn of(name: &str) -> Group {
        if name.starts_with("op/") || name.contains("/op/") {
            Group::Karat
        } else if name.contains("/attn/") {
            Group::Attention
        } else if name.contains("/mlp/") {
            Group::Mlp
        } else {
            Group::Other
        }
    }
}

/// Shared symmetric bin edges `[-range, range]` and per-group counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub range: f64,
    pub bins: usize,
    pub counts: Vec<(Group, Vec<u64>)>,
}

impl Histogram {
    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins).map(|i| -self.range + 2.0 * self.range * i as f64 / self.bins as f64).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flat_map(|(_, c)| c).sum()
    }

    pub fn group(&self, g: Group) -> Option<&[u64]> {
        self.counts.iter().find(|(k, _)| *k == g).map(|(_, c)| c.as_slice())
    }

    /// `group,bin_lo,bin_hi,count` rows.
    pub fn csv(&self) -> String {
        let edges = self.edges();
        let mut s = String::from("group,bin_lo,bin_hi,count\n");
        for (g, counts) in &self.counts {
            for (i, c) in counts.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", g.name(), edges[i], edges[i + 1], c);
            }
        }
        s
    }
}

/// Bin index of `x` in `[-range, range]` split into `bins`; out-of-range values clamp.
pub fn bin_of(x: f64, range: f64, bins: usize) -> usize {
    let t = ((x + range) / (2.0 * range) * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// Histograms every tensor in `ckpt` over one symmetric range set by the largest magnitude.
///
/// Groups with no parameters are omitted. An all-zero checkpoint uses range 1.
pub fn weight_histogram(ckpt: &Checkpoint, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let range = ckpt
        .entries()
        .iter()
        .flat_map(|(_, t)| t.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let range = if range > 0.0 { range } else { 1.0 };
    let mut counts: Vec<(Group, Vec<u64>)> = Vec::new();
    for g in Group::ALL {
        let members: Vec<_> = ckpt.entries().iter().filter(|(n, _)| Group::of(n) == g).collect();
        if members.is_empty() {
            continue;
        }
        let mut c = vec![0u64; bins];
        for (_, t) in members {
            for &v in t.data() {
                c[bin_of(v, range, bins)] += 1;
            }
        }
        counts.push((g, c));
    }
    Histogram { range, bins, counts }
}
