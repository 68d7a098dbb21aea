use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CheckIn, CheckInLog, DatasetError, Metadata};
use crate::npe::{DecisionInstance, FactorVocab, FAMILIES, POI_SLOTS};

/// Parameters of a synthetic check-in corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub users: usize,
    pub pois: usize,
    pub clusters: usize,
    /// Check-ins per user.
    pub length: usize,
    /// Probability that the next visit stays in the current POI's cluster.
    pub within_cluster_prob: f64,
    /// Number of in-cluster successors per POI.
    pub fanout: usize,
    pub categories: usize,
    pub brands: usize,
    pub user_groups: usize,
    pub mean_gap_secs: i64,
    /// Centre of the synthetic city.
    pub center_lat: f64,
    pub center_lon: f64,
    /// Distance between neighbouring cluster centres, in km.
    pub cluster_spacing_km: f64,
    /// Radius of each cluster, in km.
    pub cluster_radius_km: f64,
    pub decisions: DecisionSynthSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 120,
            pois: 600,
            clusters: 6,
            length: 20,
            within_cluster_prob: 0.9,
            fanout: 12,
            categories: 5,
            brands: 10,
            user_groups: 4,
            mean_gap_secs: 7200,
            center_lat: 22.54,
            center_lon: 114.05,
            cluster_spacing_km: 4.0,
            cluster_radius_km: 1.0,
            decisions: DecisionSynthSpec::default(),
        }
    }
}

/// Visit decisions whose label is fixed by two planted factor slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionSynthSpec {
    /// Positive decisions; each also gets one negative.
    pub positives: usize,
    /// Distinct values per factor family.
    pub values_per_family: usize,
    /// The two slots that decide the label, in factor-family order.
    pub key_slots: [usize; 2],
}

impl Default for DecisionSynthSpec {
    fn default() -> Self {
        Self {
            positives: 1500,
            values_per_family: 8,
            key_slots: [1, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPoi {
    pub poi_id: String,
    pub lat: f64,
    pub lon: f64,
    pub cluster: usize,
    pub category: String,
    pub brand: String,
}

/// Planted parameters, written as a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub spec: SynthSpec,
    pub pois: Vec<SynthPoi>,
    pub user_home_cluster: BTreeMap<String, usize>,
    /// Next-POI distribution per current POI, as sparse `(poi index, probability)` rows.
    pub transitions: Vec<Vec<(usize, f64)>>,
    /// Slots that decide decision labels.
    pub key_slots: [usize; 2],
    /// Preferred values of each key slot. A decision is positive iff both of
    /// its key-slot values are preferred.
    pub preferred: [Vec<usize>; 2],
}

/// Labelled decisions with their factor vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDecisions {
    pub instances: Vec<DecisionInstance>,
    pub vocab: FactorVocab,
    pub key_slots: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub log: CheckInLog,
    pub meta: Metadata,
    pub truth: GroundTruth,
    pub decisions: PlantedDecisions,
}

impl SynthOutput {
    pub fn truth_json(&self) -> String {
        serde_json::to_string_pretty(&self.truth).expect("ground truth serializes")
    }
}

const BASE_TIMESTAMP: i64 = 1_600_000_000;
const KM_PER_DEG: f64 = 111.195;

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthOutput, DatasetError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pois = place_pois(spec, &mut rng);
    let members: Vec<Vec<usize>> = (0..spec.clusters)
        .map(|c| (0..spec.pois).filter(|&i| pois[i].cluster == c).collect())
        .collect();
    let transitions = transition_rows(spec, &pois, &members, &mut rng);
    let samplers: Vec<WeightedIndex<f64>> = transitions
        .iter()
        .map(|row| WeightedIndex::new(row.iter().map(|&(_, p)| p)).expect("non-empty row"))
        .collect();

    let mut records = Vec::with_capacity(spec.users * spec.length);
    let mut meta = Metadata::default();
    let mut homes = BTreeMap::new();
    for u in 0..spec.users {
        let user_id = format!("u{u:04}");
        let home = u % spec.clusters;
        homes.insert(user_id.clone(), home);
        meta.user_meta.insert(
            user_id.clone(),
            BTreeSet::from([format!("home:{home}"), format!("group:{}", u % spec.user_groups)]),
        );
        let mut at = *members[home].choose(&mut rng).expect("non-empty cluster");
        let mut t = BASE_TIMESTAMP + rng.gen_range(0..86_400);
        for step in 0..spec.length {
            if step > 0 {
                at = transitions[at][samplers[at].sample(&mut rng)].0;
                let gap = spec.mean_gap_secs as f64 * rng.gen_range(0.5..2.0);
                t += gap.round().max(1.0) as i64;
            }
            let p = &pois[at];
            records.push(CheckIn {
                user_id: user_id.clone(),
                timestamp: t,
                lat: p.lat,
                lon: p.lon,
                poi_id: p.poi_id.clone(),
            });
        }
    }
    for p in &pois {
        meta.poi_meta.insert(
            p.poi_id.clone(),
            BTreeSet::from([format!("cat:{}", p.category), format!("brand:{}", p.brand), format!("cluster:{}", p.cluster)]),
        );
    }

    let (decisions, preferred) = planted_decisions(&spec.decisions, &mut rng);
    let truth = GroundTruth {
        seed,
        spec: spec.clone(),
        pois,
        user_home_cluster: homes,
        transitions,
        key_slots: spec.decisions.key_slots,
        preferred,
    };
    Ok(SynthOutput {
        log: CheckInLog::new(records),
        meta,
        truth,
        decisions,
    })
}

fn validate(spec: &SynthSpec) -> Result<(), DatasetError> {
    let bad = |m: &str| Err(DatasetError::Parameter(m.to_string()));
    if spec.users == 0 || spec.pois == 0 {
        return bad("user and POI counts must be positive");
    }
    if spec.clusters == 0 || spec.clusters > spec.pois {
        return bad("cluster count must be in 1..=pois");
    }
    if !(0.0..=1.0).contains(&spec.within_cluster_prob) {
        return bad("within_cluster_prob must lie in [0, 1]");
    }
    if spec.fanout == 0 || spec.categories == 0 || spec.brands == 0 || spec.user_groups == 0 {
        return bad("fanout, categories, brands and user_groups must be positive");
    }
    if spec.mean_gap_secs <= 0 {
        return bad("mean_gap_secs must be positive");
    }
    let d = &spec.decisions;
    if d.values_per_family < 2 {
        return bad("values_per_family must be at least 2");
    }
    if d.key_slots[0] == d.key_slots[1] || d.key_slots.iter().any(|&s| s >= FAMILIES.len()) {
        return bad("key_slots must be two distinct factor slots");
    }
    Ok(())
}

fn place_pois(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<SynthPoi> {
    let side = (spec.clusters as f64).sqrt().ceil() as usize;
    let cos_lat = spec.center_lat.to_radians().cos();
    (0..spec.pois)
        .map(|i| {
            let c = i % spec.clusters;
            let (gx, gy) = ((c % side) as f64, (c / side) as f64);
            let half = (side as f64 - 1.0) / 2.0;
            let cx = (gx - half) * spec.cluster_spacing_km;
            let cy = (gy - half) * spec.cluster_spacing_km;
            let r = spec.cluster_radius_km * rng.gen::<f64>().sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (x, y) = (cx + r * theta.cos(), cy + r * theta.sin());
            SynthPoi {
                poi_id: format!("p{i:04}"),
                lat: spec.center_lat + y / KM_PER_DEG,
                lon: spec.center_lon + x / (KM_PER_DEG * cos_lat),
                cluster: c,
                category: format!("c{}", rng.gen_range(0..spec.categories)),
                brand: format!("b{}", rng.gen_range(0..spec.brands)),
            }
        })
        .collect()
}

/// Each POI moves to one of `fanout` in-cluster successors with weight
/// proportional to `1/(rank+1)`, or uniformly to a POI of another cluster.
fn transition_rows(
    spec: &SynthSpec,
    pois: &[SynthPoi],
    members: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, f64)>> {
    (0..pois.len())
        .map(|i| {
            let c = pois[i].cluster;
            let mut own: Vec<usize> = members[c].iter().copied().filter(|&j| j != i).collect();
            if own.is_empty() {
                own.push(i);
            }
            own.shuffle(rng);
            own.truncate(spec.fanout);
            let others: Vec<usize> = (0..pois.len()).filter(|&j| pois[j].cluster != c).collect();
            let stay = if others.is_empty() { 1.0 } else { spec.within_cluster_prob };
            let z: f64 = (0..own.len()).map(|r| 1.0 / (r as f64 + 1.0)).sum();
            let mut row: BTreeMap<usize, f64> = BTreeMap::new();
            for (r, &j) in own.iter().enumerate() {
                *row.entry(j).or_default() += stay / (r as f64 + 1.0) / z;
            }
            for &j in &others {
                *row.entry(j).or_default() += (1.0 - stay) / others.len() as f64;
            }
            row.into_iter().filter(|&(_, p)| p > 0.0).collect()
        })
        .collect()
}

fn planted_decisions(spec: &DecisionSynthSpec, rng: &mut ChaCha8Rng) -> (PlantedDecisions, [Vec<usize>; 2]) {
    let v = spec.values_per_family;
    let mut vocab = FactorVocab::new();
    for fam in FAMILIES {
        for k in 0..v {
            vocab.intern(fam, &k.to_string());
        }
    }
    let id = |slot: usize, value: usize| slot * v + value;
    let mut halves = || {
        let mut vals: Vec<usize> = (0..v).collect();
        vals.shuffle(rng);
        let mut keep = vals[..v.div_ceil(2)].to_vec();
        keep.sort_unstable();
        keep
    };
    let preferred = [halves(), halves()];
    let keys = spec.key_slots;
    let is_positive = |vals: &[usize]| keys.iter().zip(&preferred).all(|(&s, p)| p.contains(&vals[s]));
    let resampled = |slot: usize| POI_SLOTS.contains(&slot) || keys.contains(&slot);

    let mut instances = Vec::with_capacity(2 * spec.positives);
    for _ in 0..spec.positives {
        let mut values: Vec<usize> = (0..FAMILIES.len()).map(|_| rng.gen_range(0..v)).collect();
        for (&s, p) in keys.iter().zip(&preferred) {
            values[s] = p[rng.gen_range(0..p.len())];
        }
        let pos = values.clone();
        // a negative redraws the POI-side and key slots until a key value falls outside its preferred set
        loop {
            for (s, x) in values.iter_mut().enumerate() {
                if resampled(s) {
                    *x = rng.gen_range(0..v);
                }
            }
            if !is_positive(&values) {
                break;
            }
        }
        let to_ids = |vals: &[usize]| vals.iter().enumerate().map(|(s, &x)| id(s, x)).collect::<Vec<_>>();
        instances.push(DecisionInstance {
            factors: to_ids(&pos),
            positive: true,
            poi: None,
        });
        instances.push(DecisionInstance {
            factors: to_ids(&values),
            positive: false,
            poi: None,
        });
    }
    (
        PlantedDecisions {
            instances,
            vocab,
            key_slots: spec.key_slots,
        },
        preferred,
    )
}
