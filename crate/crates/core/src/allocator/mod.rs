//! Per-expert bit-width allocation: pick one width in {1, 2, 3} per expert
//! so the widths sum to a budget, at least one expert gets 3 bits and one
//! gets 2, and the summed cost is minimal.

mod baseline;

pub use baseline::{baseline_cost, hessian_sensitivity, CostInputs, CostKind};

use crate::error::{Error, Result};
use crate::importance::CostTable;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BRUTEFORCE_MAX: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationProblem {
    /// `costs[i][j − 1]` for expert i at j bits.
    pub costs: Vec<[f64; 3]>,
    pub budget: usize,
    /// Require one 3-bit and one 2-bit expert (dropped when n < 2).
    pub coverage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub bits: Vec<u8>,
    pub total: usize,
    pub objective: f64,
}

pub fn budget_for(n: usize, b_avg: f64) -> usize {
    (n as f64 * b_avg).round() as usize
}

impl AllocationProblem {
    pub fn new(costs: Vec<[f64; 3]>, b_avg: f64, coverage: bool) -> Self {
        let budget = budget_for(costs.len(), b_avg);
        AllocationProblem {
            costs,
            budget,
            coverage,
        }
    }

    fn coverage_active(&self) -> bool {
        self.coverage && self.costs.len() >= 2
    }

    fn check(&self) -> Result<()> {
        let n = self.costs.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "allocation problem with no experts".into(),
            ));
        }
        if self
            .costs
            .iter()
            .flatten()
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(Error::InvalidArgument(
                "costs must be finite and non-negative".into(),
            ));
        }
        let b = self.budget;
        if b < n || b > 3 * n {
            return Err(Error::Infeasible(format!(
                "budget {b} outside [{n}, {}]: every expert needs one width in 1..=3",
                3 * n
            )));
        }
        if self.coverage_active() {
            if b < n + 3 {
                return Err(Error::Infeasible(format!(
                    "budget {b} below {}: coverage needs one 3-bit and one 2-bit expert",
                    n + 3
                )));
            }
            if b > 3 * n - 1 {
                return Err(Error::Infeasible(format!(
                    "budget {b} above {}: coverage needs one expert below 3 bits",
                    3 * n - 1
                )));
            }
        }
        Ok(())
    }

    /// Right-fold sum `c0 + (c1 + (…))`, the association the solvers use.
    pub fn objective(&self, bits: &[u8]) -> f64 {
        bits.iter()
            .zip(&self.costs)
            .rev()
            .fold(0.0, |acc, (&b, c)| c[b as usize - 1] + acc)
    }
}

fn mask_after(mask: usize, bits: u8) -> usize {
    match bits {
        3 => mask | 1,
        2 => mask | 2,
        _ => mask,
    }
}

/// Suffix DP over (expert, remaining budget, coverage mask) with coverage
/// checked and reset at each segment end. Returns the lexicographically
/// smallest optimal bits, or `None` when infeasible.
fn dp_core(
    costs: &[[f64; 3]],
    segment_ends: &[usize],
    coverage: &[bool],
    budget: usize,
) -> Option<(Vec<u8>, f64)> {
    let n = costs.len();
    let idx = |b: usize, m: usize| b * 4 + m;
    let width = (budget + 1) * 4;
    let mut f = vec![vec![f64::INFINITY; width]; n + 1];
    f[n][idx(0, 0)] = 0.0;
    // segment index whose last expert is i
    let mut seg_of_end = vec![None; n];
    for (s, &e) in segment_ends.iter().enumerate() {
        seg_of_end[e - 1] = Some(s);
    }
    let next_value = |f: &Vec<Vec<f64>>, i: usize, b: usize, m: usize| -> f64 {
        match seg_of_end[i] {
            Some(s) => {
                if coverage[s] && m != 3 {
                    f64::INFINITY
                } else {
                    f[i + 1][idx(b, 0)]
                }
            }
            None => f[i + 1][idx(b, m)],
        }
    };
    for i in (0..n).rev() {
        for b in 0..=budget {
            for m in 0..4 {
                let mut best = f64::INFINITY;
                for j in 1..=3u8 {
                    if (j as usize) > b {
                        break;
                    }
                    let rest = next_value(&f, i, b - j as usize, mask_after(m, j));
                    let v = costs[i][j as usize - 1] + rest;
                    if v < best {
                        best = v;
                    }
                }
                f[i][idx(b, m)] = best;
            }
        }
    }
    let total = f[0][idx(budget, 0)];
    if !total.is_finite() {
        return None;
    }
    let (mut b, mut m) = (budget, 0);
    let mut bits = Vec::with_capacity(n);
    for i in 0..n {
        let target = f[i][idx(b, m)];
        let j = (1..=3u8)
            .find(|&j| {
                (j as usize) <= b
                    && costs[i][j as usize - 1]
                        + next_value(&f, i, b - j as usize, mask_after(m, j))
                        == target
            })
            .expect("optimal choice exists");
        bits.push(j);
        b -= j as usize;
        m = if seg_of_end[i].is_some() {
            0
        } else {
            mask_after(m, j)
        };
    }
    Some((bits, total))
}

/// Exact minimum by dynamic programming, O(n · budget · 3 · 4).
pub fn solve_dp(p: &AllocationProblem) -> Result<BitAllocation> {
    p.check()?;
    let n = p.costs.len();
    let (bits, objective) = dp_core(&p.costs, &[n], &[p.coverage_active()], p.budget)
        .ok_or_else(|| Error::Infeasible(format!("no allocation meets budget {}", p.budget)))?;
    Ok(BitAllocation {
        bits,
        total: p.budget,
        objective,
    })
}

/// Exhaustive search over all `3^n` assignments in lexicographic order.
pub fn solve_bruteforce(p: &AllocationProblem) -> Result<BitAllocation> {
    let n = p.costs.len();
    if n > BRUTEFORCE_MAX {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to {BRUTEFORCE_MAX} experts, got {n}"
        )));
    }
    p.check()?;
    let mut bits = vec![1u8; n];
    let mut best: Option<(Vec<u8>, f64)> = None;
    loop {
        let sum: usize = bits.iter().map(|&b| b as usize).sum();
        let covered = !p.coverage_active() || (bits.contains(&3) && bits.contains(&2));
        if sum == p.budget && covered {
            let obj = p.objective(&bits);
            if best.as_ref().is_none_or(|(_, o)| obj < *o) {
                best = Some((bits.clone(), obj));
            }
        }
        // next assignment, last position fastest
        let mut pos = n;
        loop {
            if pos == 0 {
                let (bits, objective) = best.ok_or_else(|| {
                    Error::Infeasible(format!("no allocation meets budget {}", p.budget))
                })?;
                return Ok(BitAllocation {
                    bits,
                    total: p.budget,
                    objective,
                });
            }
            pos -= 1;
            if bits[pos] < 3 {
                bits[pos] += 1;
                for b in &mut bits[pos + 1..] {
                    *b = 1;
                }
                break;
            }
        }
    }
}

/// Allocation for every layer of a cost table; independent per-layer
/// budgets, or one budget shared across layers when `global` is set.
pub fn allocate_layers(
    costs: &CostTable,
    b_avg: f64,
    coverage: bool,
    global: bool,
) -> Result<Vec<BitAllocation>> {
    if !global {
        return costs
            .layers
            .iter()
            .map(|c| solve_dp(&AllocationProblem::new(c.clone(), b_avg, coverage)))
            .collect();
    }
    let flat: Vec<[f64; 3]> = costs.layers.iter().flatten().copied().collect();
    if flat
        .iter()
        .any(|c| c.iter().any(|v| !v.is_finite() || *v < 0.0))
    {
        return Err(Error::InvalidArgument(
            "costs must be finite and non-negative".into(),
        ));
    }
    let mut ends = Vec::new();
    let mut acc = 0;
    for l in &costs.layers {
        acc += l.len();
        ends.push(acc);
    }
    let cov: Vec<bool> = costs
        .layers
        .iter()
        .map(|l| coverage && l.len() >= 2)
        .collect();
    let budget = budget_for(flat.len(), b_avg);
    let (bits, _) = dp_core(&flat, &ends, &cov, budget).ok_or_else(|| {
        Error::Infeasible(format!(
            "global budget {budget} infeasible for {} experts under per-layer coverage",
            flat.len()
        ))
    })?;
    let mut out = Vec::with_capacity(costs.layers.len());
    let mut start = 0;
    for l in &costs.layers {
        let b = bits[start..start + l.len()].to_vec();
        let p = AllocationProblem {
            costs: l.clone(),
            budget: b.iter().map(|&x| x as usize).sum(),
            coverage,
        };
        out.push(BitAllocation {
            objective: p.objective(&b),
            total: p.budget,
            bits: b,
        });
        start += l.len();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub b_avg: f64,
    pub allocations: Vec<BitAllocation>,
    /// Sum of per-layer objectives.
    pub objective: f64,
}

/// Per-layer allocations across a grid of average bit-widths.
pub fn allocation_sweep(
    costs: &CostTable,
    b_avgs: &[f64],
    coverage: bool,
) -> Result<Vec<SweepPoint>> {
    b_avgs
        .iter()
        .map(|&b_avg| {
            let allocations = allocate_layers(costs, b_avg, coverage, false)?;
            let objective = allocations.iter().map(|a| a.objective).sum();
            Ok(SweepPoint {
                b_avg,
                allocations,
                objective,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocationRecord {
    pub bits: Vec<u8>,
    pub budget: usize,
    pub objective: f64,
    pub cost_kind: CostKind,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

pub type AllocationFile = BTreeMap<usize, LayerAllocationRecord>;

pub fn allocation_record(
    allocs: &[BitAllocation],
    kind: CostKind,
    exps: (f64, f64, f64),
) -> AllocationFile {
    allocs
        .iter()
        .enumerate()
        .map(|(l, a)| {
            (
                l,
                LayerAllocationRecord {
                    bits: a.bits.clone(),
                    budget: a.total,
                    objective: a.objective,
                    cost_kind: kind,
                    alpha: exps.0,
                    beta: exps.1,
                    gamma: exps.2,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_experts_forced_pair() {
        let p = AllocationProblem {
            costs: vec![[9.0, 5.0, 1.0], [9.0, 2.0, 1.5]],
            budget: 5,
            coverage: true,
        };
        // {3,2}: 1+2 = 3; {2,3}: 5+1.5 = 6.5
        let a = solve_dp(&p).unwrap();
        assert_eq!(a.bits, vec![3, 2]);
        assert_eq!(a.objective, 3.0);
    }

    #[test]
    fn coverage_infeasibility_is_named() {
        let p = AllocationProblem {
            costs: vec![[1.0; 3]; 4],
            budget: 4,
            coverage: true,
        };
        match solve_dp(&p) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("coverage")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_expert_without_coverage() {
        let p = AllocationProblem {
            costs: vec![[3.0, 2.0, 1.0]],
            budget: 2,
            coverage: true,
        };
        assert_eq!(solve_bruteforce(&p).unwrap().bits, vec![2]);
        assert_eq!(solve_dp(&p).unwrap().bits, vec![2]);
    }

    #[test]
    fn mixtral_layer_budget() {
        assert_eq!(budget_for(8, 2.0), 16);
    }
}
