//! Random instance generators. Every draw is a pure function of
//! (master_seed, split, index), so batches are reproducible and extending a
//! batch never changes earlier instances.

use super::{ConSense, Family, InstanceError, InstanceSet, MilpInstance, Split};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Multi-constraint 0/1 knapsack. Values and weights are uniform integers;
/// each capacity is a fixed fraction of that row's total weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnapsackParams {
    pub items: usize,
    pub constraints: usize,
    pub value_max: u32,
    pub weight_max: u32,
    pub capacity_ratio: f64,
}

impl Default for KnapsackParams {
    fn default() -> Self {
        KnapsackParams {
            items: 18,
            constraints: 2,
            value_max: 100,
            weight_max: 50,
            capacity_ratio: 0.5,
        }
    }
}

/// Set cover over a fixed universe: binary variable per candidate set, one
/// covering row per element. Membership is Bernoulli(density) with a repair
/// pass so every element is covered by at least one set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetCoverParams {
    pub universe: usize,
    pub sets: usize,
    pub density: f64,
    pub cost_max: u32,
}

impl Default for SetCoverParams {
    fn default() -> Self {
        SetCoverParams {
            universe: 20,
            sets: 30,
            density: 0.18,
            cost_max: 20,
        }
    }
}

/// Capacitated facility location, desk scale: binary open/close variable per
/// facility, continuous assignment fractions. Capacities are drawn so that
/// opening everything always covers total demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CflpParams {
    pub facilities: usize,
    pub customers: usize,
    pub demand_max: u32,
    pub open_cost_max: u32,
    pub assign_cost_max: u32,
}

impl Default for CflpParams {
    fn default() -> Self {
        CflpParams {
            facilities: 5,
            customers: 10,
            demand_max: 20,
            open_cost_max: 100,
            assign_cost_max: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyParams {
    Knapsack(KnapsackParams),
    SetCover(SetCoverParams),
    CflpSmall(CflpParams),
}

impl FamilyParams {
    pub fn family(&self) -> Family {
        match self {
            FamilyParams::Knapsack(_) => Family::Knapsack,
            FamilyParams::SetCover(_) => Family::SetCover,
            FamilyParams::CflpSmall(_) => Family::CflpSmall,
        }
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        fn check(
            ok: bool,
            name: &'static str,
            value: f64,
            range: &'static str,
        ) -> Result<(), InstanceError> {
            if ok {
                Ok(())
            } else {
                Err(InstanceError::ParamOutOfRange { name, value, range })
            }
        }
        match self {
            FamilyParams::Knapsack(p) => {
                check((10..=60).contains(&p.items), "items", p.items as f64, "[10, 60]")?;
                check(
                    (1..=5).contains(&p.constraints),
                    "constraints",
                    p.constraints as f64,
                    "[1, 5]",
                )?;
                check(p.value_max >= 1, "value_max", p.value_max as f64, ">= 1")?;
                check(p.weight_max >= 1, "weight_max", p.weight_max as f64, ">= 1")?;
                check(
                    p.capacity_ratio > 0.0 && p.capacity_ratio <= 1.0,
                    "capacity_ratio",
                    p.capacity_ratio,
                    "(0, 1]",
                )
            }
            FamilyParams::SetCover(p) => {
                check(
                    (4..=80).contains(&p.universe),
                    "universe",
                    p.universe as f64,
                    "[4, 80]",
                )?;
                check((4..=120).contains(&p.sets), "sets", p.sets as f64, "[4, 120]")?;
                check(
                    p.density > 0.0 && p.density <= 1.0,
                    "density",
                    p.density,
                    "(0, 1]",
                )?;
                check(p.cost_max >= 1, "cost_max", p.cost_max as f64, ">= 1")
            }
            FamilyParams::CflpSmall(p) => {
                check(
                    (2..=8).contains(&p.facilities),
                    "facilities",
                    p.facilities as f64,
                    "[2, 8]",
                )?;
                check(
                    (2..=20).contains(&p.customers),
                    "customers",
                    p.customers as f64,
                    "[2, 20]",
                )?;
                check(p.demand_max >= 1, "demand_max", p.demand_max as f64, ">= 1")?;
                check(
                    p.open_cost_max >= 1,
                    "open_cost_max",
                    p.open_cost_max as f64,
                    ">= 1",
                )?;
                check(
                    p.assign_cost_max >= 1,
                    "assign_cost_max",
                    p.assign_cost_max as f64,
                    ">= 1",
                )
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-instance seed. Split salts keep the three streams disjoint.
pub fn instance_seed(master_seed: u64, split: Split, index: u64) -> u64 {
    let salt = match split {
        Split::Train => 0x7452_4149_4E00_0001,
        Split::Calibration => 0x4341_4C49_4200_0002,
        Split::Test => 0x5445_5354_0000_0003,
    };
    splitmix64(splitmix64(master_seed ^ salt).wrapping_add(splitmix64(index)))
}

/// Draws `count` iid instances from the family stream for `split`.
pub fn generate_family(
    params: &FamilyParams,
    master_seed: u64,
    count: usize,
    split: Split,
) -> Result<InstanceSet, InstanceError> {
    params.validate()?;
    let mut instances = Vec::with_capacity(count);
    for index in 0..count {
        let seed = instance_seed(master_seed, split, index as u64);
        let id = format!("{}-{}-{:05}", params.family(), split, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = match params {
            FamilyParams::Knapsack(p) => gen_knapsack(id, seed, p, &mut rng),
            FamilyParams::SetCover(p) => gen_set_cover(id, seed, p, &mut rng),
            FamilyParams::CflpSmall(p) => gen_cflp(id, seed, p, &mut rng),
        };
        debug_assert!(inst.validate().is_ok());
        instances.push(inst);
    }
    Ok(InstanceSet {
        split,
        master_seed,
        instances,
    })
}

fn gen_knapsack(id: String, seed: u64, p: &KnapsackParams, rng: &mut ChaCha8Rng) -> MilpInstance {
    let n = p.items;
    let values: Vec<f64> = (0..n)
        .map(|_| rng.random_range(1..=p.value_max) as f64)
        .collect();
    let mut con_matrix = Vec::with_capacity(p.constraints * n);
    let mut con_rhs = Vec::with_capacity(p.constraints);
    let mut theta = BTreeMap::new();
    for k in 0..p.constraints {
        let weights: Vec<f64> = (0..n)
            .map(|_| rng.random_range(1..=p.weight_max) as f64)
            .collect();
        let total: f64 = weights.iter().sum();
        let heaviest = weights.iter().cloned().fold(0.0, f64::max);
        let cap = (p.capacity_ratio * total).round().max(heaviest);
        theta.insert(format!("capacity_{k}"), cap);
        theta.insert(format!("weight_sum_{k}"), total);
        con_matrix.extend(weights);
        con_rhs.push(cap);
    }
    theta.insert("items".into(), n as f64);
    theta.insert("constraints".into(), p.constraints as f64);
    theta.insert("capacity_ratio".into(), p.capacity_ratio);
    theta.insert("value_sum".into(), values.iter().sum());
    MilpInstance {
        id,
        family: Family::Knapsack,
        objective: values.iter().map(|v| -v).collect(),
        con_matrix,
        con_rhs,
        con_sense: vec![ConSense::Le; p.constraints],
        var_lower: vec![0.0; n],
        var_upper: vec![1.0; n],
        is_integer: vec![true; n],
        theta_seed: seed,
        theta_params: theta,
    }
}

fn gen_set_cover(id: String, seed: u64, p: &SetCoverParams, rng: &mut ChaCha8Rng) -> MilpInstance {
    let (u, k) = (p.universe, p.sets);
    let mut member = vec![false; u * k];
    for e in 0..u {
        for s in 0..k {
            member[e * k + s] = rng.random_bool(p.density);
        }
    }
    // Repair pass: every element must be coverable or the instance is trivially
    // infeasible.
    for e in 0..u {
        if !member[e * k..(e + 1) * k].iter().any(|&m| m) {
            let s = rng.random_range(0..k);
            member[e * k + s] = true;
        }
    }
    let costs: Vec<f64> = (0..k)
        .map(|_| rng.random_range(1..=p.cost_max) as f64)
        .collect();
    let con_matrix: Vec<f64> = member.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let cover_total: f64 = con_matrix.iter().sum();
    let mut theta = BTreeMap::new();
    theta.insert("universe".into(), u as f64);
    theta.insert("sets".into(), k as f64);
    theta.insert("density".into(), p.density);
    theta.insert("cost_sum".into(), costs.iter().sum());
    theta.insert("cover_mean".into(), cover_total / u as f64);
    MilpInstance {
        id,
        family: Family::SetCover,
        objective: costs,
        con_matrix,
        con_rhs: vec![1.0; u],
        con_sense: vec![ConSense::Ge; u],
        var_lower: vec![0.0; k],
        var_upper: vec![1.0; k],
        is_integer: vec![true; k],
        theta_seed: seed,
        theta_params: theta,
    }
}

fn gen_cflp(id: String, seed: u64, p: &CflpParams, rng: &mut ChaCha8Rng) -> MilpInstance {
    let (nf, nc) = (p.facilities, p.customers);
    let demand: Vec<f64> = (0..nc)
        .map(|_| rng.random_range(1..=p.demand_max) as f64)
        .collect();
    let total_demand: f64 = demand.iter().sum();
    // Each capacity is at least ceil(D/F), so opening every facility is always
    // feasible.
    let cap_lo = (total_demand / nf as f64).ceil() as u32;
    let capacity: Vec<f64> = (0..nf)
        .map(|_| rng.random_range(cap_lo..=2 * cap_lo) as f64)
        .collect();
    let open_cost: Vec<f64> = (0..nf)
        .map(|_| rng.random_range(1..=p.open_cost_max) as f64)
        .collect();
    let assign_cost: Vec<f64> = (0..nc * nf)
        .map(|_| rng.random_range(1..=p.assign_cost_max) as f64)
        .collect();

    // Variables: y_0..y_{nf-1} then x_{i,j} customer-major.
    let n = nf + nc * nf;
    let var = |i: usize, j: usize| nf + i * nf + j;
    let mut objective = vec![0.0; n];
    objective[..nf].copy_from_slice(&open_cost);
    objective[nf..].copy_from_slice(&assign_cost);

    let mut con_matrix = Vec::new();
    let mut con_rhs = Vec::new();
    let mut con_sense = Vec::new();
    for i in 0..nc {
        let mut row = vec![0.0; n];
        for j in 0..nf {
            row[var(i, j)] = 1.0;
        }
        con_matrix.extend(row);
        con_rhs.push(1.0);
        con_sense.push(ConSense::Eq);
    }
    for j in 0..nf {
        let mut row = vec![0.0; n];
        row[j] = -capacity[j];
        for i in 0..nc {
            row[var(i, j)] = demand[i];
        }
        con_matrix.extend(row);
        con_rhs.push(0.0);
        con_sense.push(ConSense::Le);
    }

    let mut is_integer = vec![false; n];
    is_integer[..nf].fill(true);
    let mut theta = BTreeMap::new();
    theta.insert("facilities".into(), nf as f64);
    theta.insert("customers".into(), nc as f64);
    theta.insert("demand_sum".into(), total_demand);
    theta.insert("capacity_sum".into(), capacity.iter().sum());
    theta.insert("open_cost_sum".into(), open_cost.iter().sum());
    MilpInstance {
        id,
        family: Family::CflpSmall,
        objective,
        con_matrix,
        con_rhs,
        con_sense,
        var_lower: vec![0.0; n],
        var_upper: vec![1.0; n],
        is_integer,
        theta_seed: seed,
        theta_params: theta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_call_is_byte_identical() {
        let params = FamilyParams::Knapsack(KnapsackParams::default());
        let a = generate_family(&params, 7, 5, Split::Train).unwrap();
        let b = generate_family(&params, 7, 5, Split::Train).unwrap();
        let ser = |s: &InstanceSet| serde_json::to_vec(s).unwrap();
        assert_eq!(ser(&a), ser(&b));
    }

    #[test]
    fn splits_use_disjoint_seed_streams() {
        let mut seen = std::collections::HashSet::new();
        for master in [0u64, 7, 123_456_789] {
            for split in [Split::Train, Split::Calibration, Split::Test] {
                for index in 0..200 {
                    assert!(
                        seen.insert(instance_seed(master, split, index)),
                        "seed collision at master={master} split={split} index={index}"
                    );
                }
            }
        }
    }

    #[test]
    fn knapsack_capacity_admits_heaviest_item() {
        let params = FamilyParams::Knapsack(KnapsackParams {
            capacity_ratio: 0.01,
            ..KnapsackParams::default()
        });
        let set = generate_family(&params, 3, 20, Split::Test).unwrap();
        for inst in &set.instances {
            for (i, row_cap) in inst.con_rhs.iter().enumerate() {
                let heaviest = inst.row(i).iter().cloned().fold(0.0, f64::max);
                assert!(heaviest <= *row_cap);
            }
        }
    }

    #[test]
    fn set_cover_rows_are_coverable() {
        let params = FamilyParams::SetCover(SetCoverParams {
            density: 0.02,
            ..SetCoverParams::default()
        });
        let set = generate_family(&params, 11, 20, Split::Train).unwrap();
        for inst in &set.instances {
            for i in 0..inst.num_cons() {
                assert!(inst.row(i).iter().sum::<f64>() >= 1.0, "uncoverable element");
            }
        }
    }

    #[test]
    fn cflp_total_capacity_covers_demand() {
        let params = FamilyParams::CflpSmall(CflpParams::default());
        let set = generate_family(&params, 5, 20, Split::Calibration).unwrap();
        for inst in &set.instances {
            assert!(inst.theta_params["capacity_sum"] >= inst.theta_params["demand_sum"]);
            assert_eq!(inst.num_integer_vars(), 5);
        }
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let params = FamilyParams::Knapsack(KnapsackParams {
            items: 5,
            ..KnapsackParams::default()
        });
        assert!(matches!(
            generate_family(&params, 1, 1, Split::Train),
            Err(InstanceError::ParamOutOfRange { name: "items", .. })
        ));
    }
}
