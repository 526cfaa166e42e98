//! Synthetic data that breaks the sensitive-attribute/label dependence, and
//! the training mixture built from original and synthetic queries.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, Record, Role, Schema, Value};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Sampling order for hierarchical generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeHierarchy {
    #[serde(rename = "non_sensitive")]
    pub non_sensitive_order: Vec<String>,
    pub sensitive: String,
    #[serde(default, rename = "proxies")]
    pub proxy_order: Vec<String>,
}

impl AttributeHierarchy {
    /// The three groups must partition the non-label attributes without repeats.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let mut named = BTreeSet::new();
        let all = self
            .non_sensitive_order
            .iter()
            .chain(std::iter::once(&self.sensitive))
            .chain(&self.proxy_order);
        for n in all {
            if !named.insert(n.as_str()) {
                return Err(Error::Schema(format!("`{n}` appears twice in hierarchy")));
            }
            let a = schema
                .attribute(n)
                .ok_or_else(|| Error::Schema(format!("hierarchy names unknown `{n}`")))?;
            if a.role == Role::Label {
                return Err(Error::Schema(format!("hierarchy must not contain label `{n}`")));
            }
        }
        for a in &schema.attributes {
            if a.role != Role::Label && !named.contains(a.name.as_str()) {
                return Err(Error::Schema(format!("hierarchy omits `{}`", a.name)));
            }
        }
        let role = |n: &str| schema.attribute(n).map(|a| a.role);
        if role(&self.sensitive) != Some(Role::Sensitive) {
            return Err(Error::Schema(format!(
                "`{}` is not the sensitive attribute",
                self.sensitive
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    Hierarchical,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_tilde: usize,
    pub seed: u64,
    pub unique: bool,
    pub mode: GenerationMode,
}

const UNIQUE_RETRIES: usize = 100;

fn distinct<'a>(rows: impl Iterator<Item = &'a Record>, col: usize) -> Vec<&'a Value> {
    rows.map(|r| &r.values[col])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn pick<'a, T>(rng: &mut Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

struct Generator<'a> {
    d: &'a Dataset,
    cfg: &'a GenerationConfig,
    seen: HashSet<Vec<Value>>,
}

impl<'a> Generator<'a> {
    fn new(d: &'a Dataset, cfg: &'a GenerationConfig) -> Self {
        let seen = if cfg.unique {
            d.records.iter().map(|r| r.values.clone()).collect()
        } else {
            HashSet::new()
        };
        Self { d, cfg, seen }
    }

    /// Draw samples until `n_tilde` are collected. `head` draws the label
    /// and sensitive value once per sample; a duplicate redraws only the
    /// `body`, so rejections cannot couple the two.
    fn run(
        mut self,
        mut head: impl FnMut(&mut Rng) -> (Value, Value),
        mut body: impl FnMut(&mut Rng, &Value, &Value) -> Result<Vec<Value>>,
    ) -> Result<Dataset> {
        let mut rng = seed::rng(self.cfg.seed);
        let mut records = Vec::with_capacity(self.cfg.n_tilde);
        let mut duplicates = 0usize;
        for id in 0..self.cfg.n_tilde {
            let (y, s) = head(&mut rng);
            let mut values = body(&mut rng, &y, &s)?;
            if self.cfg.unique {
                let mut tries = 1;
                while self.seen.contains(&values) && tries < UNIQUE_RETRIES {
                    values = body(&mut rng, &y, &s)?;
                    tries += 1;
                }
                if !self.seen.insert(values.clone()) {
                    duplicates += 1;
                }
            }
            records.push(Record {
                id: id as u64,
                values,
            });
        }
        if duplicates > 0 {
            warn!(
                "accepted {duplicates} duplicate synthetic records after {UNIQUE_RETRIES} retries each"
            );
        }
        Ok(Dataset::new(
            self.d.schema.clone(),
            records,
            Provenance::Augmented,
        ))
    }
}

/// Hierarchical attribute sampling.
///
/// Label uniform over its domain; each non-sensitive attribute uniform over
/// the distinct values present in the rows matching everything sampled so far;
/// sensitive value uniform over its domain; each proxy uniform over the
/// distinct values among rows sharing the sensitive value and earlier proxies.
pub fn generate_hierarchical(
    d: &Dataset,
    h: &AttributeHierarchy,
    cfg: &GenerationConfig,
) -> Result<Dataset> {
    if cfg.mode != GenerationMode::Hierarchical {
        return Err(Error::Config("generate_hierarchical needs hierarchical mode".into()));
    }
    if d.is_empty() {
        return Err(Error::Config("cannot generate from an empty dataset".into()));
    }
    h.validate(&d.schema)?;
    let schema = &d.schema;
    let label = schema.label_index();
    let col = |n: &str| schema.index_of(n).unwrap();
    let order: Vec<usize> = h.non_sensitive_order.iter().map(|n| col(n)).collect();
    let sensitive = col(&h.sensitive);
    let proxies: Vec<usize> = h.proxy_order.iter().map(|n| col(n)).collect();
    let label_domain = &schema.attributes[label].domain;
    let sensitive_domain = &schema.attributes[sensitive].domain;

    let mut by_label: BTreeMap<&Value, Vec<&Record>> = BTreeMap::new();
    let mut by_sensitive: BTreeMap<&Value, Vec<&Record>> = BTreeMap::new();
    for r in &d.records {
        by_label.entry(&r.values[label]).or_default().push(r);
        by_sensitive.entry(&r.values[sensitive]).or_default().push(r);
    }
    let label_tries: BTreeMap<&Value, Trie> =
        by_label.iter().map(|(&y, rows)| (y, Trie::build(rows, &order))).collect();
    let proxy_tries: BTreeMap<&Value, Trie> =
        by_sensitive.iter().map(|(&s, rows)| (s, Trie::build(rows, &proxies))).collect();
    let width = schema.attributes.len();

    Generator::new(d, cfg).run(
        |rng| (pick(rng, label_domain).clone(), pick(rng, sensitive_domain).clone()),
        |rng, y, s| {
            let mut values = vec![Value::Num(0); width];
            values[label] = y.clone();
            let trie = label_tries.get(y).ok_or_else(|| {
                Error::Config(format!("no rows with label `{y}` to sample from"))
            })?;
            trie.walk(rng, &order, &mut values);
            values[sensitive] = s.clone();
            if !proxies.is_empty() {
                let trie = proxy_tries.get(s).ok_or_else(|| {
                    Error::Config(format!("no rows with `{}` = `{s}` to sample proxies from", h.sensitive))
                })?;
                trie.walk(rng, &proxies, &mut values);
            }
            Ok(values)
        },
    )
}

/// Distinct value paths through `cols`, so that each conditional draw is a
/// uniform pick among the children of the current node.
struct Trie<'a> {
    keys: Vec<&'a Value>,
    children: Vec<Trie<'a>>,
}

impl<'a> Trie<'a> {
    fn build(rows: &[&'a Record], cols: &[usize]) -> Self {
        let Some((&c, rest)) = cols.split_first() else {
            return Self { keys: Vec::new(), children: Vec::new() };
        };
        let mut groups: BTreeMap<&Value, Vec<&Record>> = BTreeMap::new();
        for &r in rows {
            groups.entry(&r.values[c]).or_default().push(r);
        }
        let (keys, children) = groups
            .into_iter()
            .map(|(k, sub)| (k, Self::build(&sub, rest)))
            .unzip();
        Self { keys, children }
    }

    fn walk(&self, rng: &mut Rng, cols: &[usize], values: &mut [Value]) {
        let mut node = self;
        for &c in cols {
            let i = rng.gen_range(0..node.keys.len());
            values[c] = node.keys[i].clone();
            node = &node.children[i];
        }
    }
}

/// Every attribute and the label drawn independently and uniformly over its
/// observed domain.
pub fn generate_random(d: &Dataset, cfg: &GenerationConfig) -> Result<Dataset> {
    if cfg.mode != GenerationMode::Random {
        return Err(Error::Config("generate_random needs random mode".into()));
    }
    if d.is_empty() {
        return Err(Error::Config("cannot generate from an empty dataset".into()));
    }
    let domains: Vec<Vec<&Value>> = (0..d.schema.attributes.len())
        .map(|i| distinct(d.records.iter(), i))
        .collect();
    let label = d.schema.label_index();
    let sensitive = d.schema.sensitive_index();
    Generator::new(d, cfg).run(
        |rng| {
            let y = (*pick(rng, &domains[label])).clone();
            let s = sensitive.map_or(Value::Num(0), |i| (*pick(rng, &domains[i])).clone());
            (y, s)
        },
        |rng, y, s| {
            Ok(domains
                .iter()
                .enumerate()
                .map(|(i, dom)| {
                    if i == label {
                        y.clone()
                    } else if Some(i) == sensitive {
                        s.clone()
                    } else {
                        (*pick(rng, dom)).clone()
                    }
                })
                .collect())
        },
    )
}

pub fn generate(d: &Dataset, h: Option<&AttributeHierarchy>, cfg: &GenerationConfig) -> Result<Dataset> {
    match cfg.mode {
        GenerationMode::Hierarchical => {
            let h = h.ok_or_else(|| Error::Config("hierarchical mode needs a hierarchy".into()))?;
            generate_hierarchical(d, h, cfg)
        }
        GenerationMode::Random => generate_random(d, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub demo_ids: Vec<u64>,
    pub query_id: u64,
    pub query_source: QuerySource,
}

/// One instance per record of `d` then of `d_tilde`, each with `q` demos drawn
/// from `d` without replacement (never the query itself).
pub fn build_training_mixture(
    d: &Dataset,
    d_tilde: &Dataset,
    q: usize,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    if q > 0 && q + 1 > d.size() {
        return Err(Error::Config(format!(
            "q = {q} demonstrations need at least {} original records, have {}",
            q + 1,
            d.size()
        )));
    }
    let mut rng = seed::rng(seed);
    let ids: Vec<u64> = d.records.iter().map(|r| r.id).collect();
    let mut out = Vec::with_capacity(d.size() + d_tilde.size());
    let queries = d
        .records
        .iter()
        .map(|r| (r.id, QuerySource::Original))
        .chain(d_tilde.records.iter().map(|r| (r.id, QuerySource::Augmented)));
    for (query_id, query_source) in queries {
        let demo_ids = if query_source == QuerySource::Original {
            // Draw from D with the query removed.
            let pos = ids.iter().position(|&i| i == query_id).unwrap();
            seed::sample_indices(&mut rng, ids.len() - 1, q)
                .into_iter()
                .map(|i| ids[if i >= pos { i + 1 } else { i }])
                .collect()
        } else {
            seed::sample_indices(&mut rng, ids.len(), q)
                .into_iter()
                .map(|i| ids[i])
                .collect()
        };
        out.push(TrainingInstance {
            demo_ids,
            query_id,
            query_source,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecorrelationReport {
    pub positive_rate: BTreeMap<String, f64>,
    pub gap: f64,
}

/// Positive-label rate per sensitive group and the absolute gap between the
/// two groups.
pub fn decorrelation_report(d: &Dataset) -> Result<DecorrelationReport> {
    let s = d.schema.require_sensitive()?;
    let domain = &d.schema.attributes[s].domain;
    if domain.len() != 2 {
        return Err(Error::Schema("decorrelation needs a binary sensitive attribute".into()));
    }
    let mut positive_rate = BTreeMap::new();
    let mut rates = Vec::new();
    for g in domain {
        let rows: Vec<&Record> = d.records.iter().filter(|r| r.values[s] == *g).collect();
        if rows.is_empty() {
            return Err(Error::GroupAbsent(g.to_string()));
        }
        let pos = rows.iter().filter(|r| d.is_positive(r)).count();
        let rate = pos as f64 / rows.len() as f64;
        positive_rate.insert(g.to_string(), rate);
        rates.push(rate);
    }
    Ok(DecorrelationReport {
        positive_rate,
        gap: (rates[0] - rates[1]).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Kind, Schema};

    fn schema(attrs: &[(&str, Role)], hierarchy: Option<AttributeHierarchy>) -> Schema {
        Schema {
            attributes: attrs
                .iter()
                .map(|(n, role)| crate::data::Attribute {
                    name: n.to_string(),
                    kind: Kind::Categorical,
                    role: *role,
                    domain: vec![],
                })
                .collect(),
            positive: Value::cat("1"),
            majority: Some(Value::cat("M")),
            template: None,
            hierarchy,
        }
    }

    fn dataset(schema: Schema, rows: &[&[&str]]) -> Dataset {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, r)| Record {
                id: i as u64,
                values: r.iter().map(|v| Value::cat(*v)).collect(),
            })
            .collect();
        let mut d = Dataset::new(schema, records, Provenance::Original);
        d.refresh_domains();
        d
    }

    fn toy() -> (Dataset, AttributeHierarchy) {
        let h = AttributeHierarchy {
            non_sensitive_order: vec!["education".into()],
            sensitive: "sex".into(),
            proxy_order: vec![],
        };
        let s = schema(
            &[
                ("education", Role::NonSensitive),
                ("sex", Role::Sensitive),
                ("income", Role::Label),
            ],
            Some(h.clone()),
        );
        let d = dataset(
            s,
            &[
                &["HS", "M", "0"],
                &["HS", "F", "0"],
                &["BS", "M", "1"],
                &["BS", "F", "1"],
            ],
        );
        (d, h)
    }

    fn cfg(n: usize, mode: GenerationMode, unique: bool) -> GenerationConfig {
        GenerationConfig {
            n_tilde: n,
            seed: 11,
            unique,
            mode,
        }
    }

    #[test]
    fn hierarchical_toy_keeps_label_education_link() {
        let (d, h) = toy();
        let out = generate_hierarchical(&d, &h, &cfg(4000, GenerationMode::Hierarchical, false)).unwrap();
        assert_eq!(out.size(), 4000);
        let mut male = 0;
        for r in &out.records {
            let (e, s, y) = (&r.values[0], &r.values[1], &r.values[2]);
            // The toy's conditional subsets force the education value.
            if *y == Value::cat("1") {
                assert_eq!(*e, Value::cat("BS"));
            } else {
                assert_eq!(*e, Value::cat("HS"));
            }
            if *s == Value::cat("M") {
                male += 1;
            }
        }
        // P(sex=M) = 1/2: 3 sigma for n = 4000 is ~95.
        assert!((male as i64 - 2000).abs() < 95, "male = {male}");
        assert!(decorrelation_report(&out).unwrap().gap < 0.08);
    }

    #[test]
    fn single_label_domain_forces_label() {
        let (d, h) = toy();
        let only_pos = Dataset::new(
            d.schema.clone(),
            d.records[2..].to_vec(),
            Provenance::Original,
        );
        let mut only_pos = only_pos;
        only_pos.schema.attributes[2].domain = vec![Value::cat("1")];
        let out = generate_hierarchical(&only_pos, &h, &cfg(50, GenerationMode::Hierarchical, false)).unwrap();
        assert!(out.records.iter().all(|r| r.values[2] == Value::cat("1")));
    }

    #[test]
    fn random_mode_breaks_the_link() {
        let (d, _) = toy();
        let out = generate_random(&d, &cfg(8000, GenerationMode::Random, false)).unwrap();
        let pos: Vec<_> = out.records.iter().filter(|r| r.values[2] == Value::cat("1")).collect();
        let bs = pos.iter().filter(|r| r.values[0] == Value::cat("BS")).count();
        let p = bs as f64 / pos.len() as f64;
        assert!((p - 0.5).abs() < 0.05, "P(BS | y=1) = {p}");
    }

    #[test]
    fn random_single_row_repeats_it() {
        let (d, _) = toy();
        let one = dataset(d.schema.clone(), &[&["HS", "M", "0"]]);
        let out = generate_random(&one, &cfg(10, GenerationMode::Random, false)).unwrap();
        assert!(out.records.iter().all(|r| r.values == one.records[0].values));
    }

    #[test]
    fn generation_is_deterministic() {
        let (d, h) = toy();
        let c = cfg(200, GenerationMode::Hierarchical, false);
        assert_eq!(generate_hierarchical(&d, &h, &c).unwrap(), generate_hierarchical(&d, &h, &c).unwrap());
        let c = cfg(200, GenerationMode::Random, false);
        assert_eq!(generate_random(&d, &c).unwrap(), generate_random(&d, &c).unwrap());
    }

    #[test]
    fn unique_avoids_duplicates_and_originals() {
        let h = AttributeHierarchy {
            non_sensitive_order: vec!["a".into(), "b".into()],
            sensitive: "sex".into(),
            proxy_order: vec![],
        };
        let s = schema(
            &[("a", Role::NonSensitive), ("b", Role::NonSensitive), ("sex", Role::Sensitive), ("income", Role::Label)],
            Some(h.clone()),
        );
        let rows: Vec<Vec<String>> = (0..6)
            .flat_map(|a| (0..6).map(move |b| vec![a.to_string(), b.to_string(), ["M", "F"][usize::from(a >= 3)].to_string(), ((a + b) % 2).to_string()]))
            .collect();
        let refs: Vec<Vec<&str>> = rows.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let refs: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        let d = dataset(s, &refs);
        let out = generate_hierarchical(&d, &h, &cfg(30, GenerationMode::Hierarchical, true)).unwrap();
        let originals: HashSet<_> = d.records.iter().map(|r| r.values.clone()).collect();
        let mut seen = HashSet::new();
        for r in &out.records {
            assert!(!originals.contains(&r.values));
            assert!(seen.insert(r.values.clone()));
        }
    }

    #[test]
    fn uniqueness_does_not_couple_label_and_sensitive() {
        // Most positives are male, so male positives collide with originals
        // far more often than female ones.
        let h = AttributeHierarchy {
            non_sensitive_order: vec!["a".into()],
            sensitive: "sex".into(),
            proxy_order: vec![],
        };
        let s = schema(
            &[("a", Role::NonSensitive), ("sex", Role::Sensitive), ("income", Role::Label)],
            Some(h.clone()),
        );
        let rows: Vec<Vec<String>> = (0..2000)
            .map(|i| {
                let y = i % 2;
                let male = if y == 1 { i % 10 != 1 } else { i % 10 == 0 };
                vec![i.to_string(), ["F", "M"][usize::from(male)].to_string(), y.to_string()]
            })
            .collect();
        let refs: Vec<Vec<&str>> = rows.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let refs: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        let d = dataset(s, &refs);
        let mut c = cfg(1500, GenerationMode::Hierarchical, true);
        c.seed = 3;
        let out = generate_hierarchical(&d, &h, &c).unwrap();
        assert!(decorrelation_report(&out).unwrap().gap < 0.08);
    }

    #[test]
    fn proxies_follow_sensitive_value() {
        let h = AttributeHierarchy {
            non_sensitive_order: vec!["education".into()],
            sensitive: "sex".into(),
            proxy_order: vec!["relationship".into()],
        };
        let s = schema(
            &[
                ("education", Role::NonSensitive),
                ("sex", Role::Sensitive),
                ("relationship", Role::ProxySensitive),
                ("income", Role::Label),
            ],
            Some(h.clone()),
        );
        let d = dataset(
            s,
            &[
                &["HS", "M", "Husband", "1"],
                &["HS", "F", "Wife", "0"],
                &["BS", "M", "Husband", "0"],
                &["BS", "F", "Wife", "1"],
                &["BS", "F", "Unmarried", "1"],
            ],
        );
        let out = generate_hierarchical(&d, &h, &cfg(500, GenerationMode::Hierarchical, false)).unwrap();
        for r in &out.records {
            match r.values[1].to_string().as_str() {
                "M" => assert_eq!(r.values[2], Value::cat("Husband")),
                _ => assert_ne!(r.values[2], Value::cat("Husband")),
            }
        }
    }

    #[test]
    fn hierarchy_must_partition_attributes() {
        let (d, _) = toy();
        let missing = AttributeHierarchy {
            non_sensitive_order: vec![],
            sensitive: "sex".into(),
            proxy_order: vec![],
        };
        assert!(missing.validate(&d.schema).is_err());
        let dup = AttributeHierarchy {
            non_sensitive_order: vec!["education".into(), "education".into()],
            sensitive: "sex".into(),
            proxy_order: vec![],
        };
        assert!(dup.validate(&d.schema).is_err());
    }

    #[test]
    fn mixture_small_enumeration() {
        let (d, _) = toy();
        let d3 = Dataset::new(d.schema.clone(), d.records[..3].to_vec(), Provenance::Original);
        let dt = Dataset::new(d.schema.clone(), vec![Record { id: 0, values: d.records[3].values.clone() }], Provenance::Augmented);
        for seed in 0..20 {
            let m = build_training_mixture(&d3, &dt, 2, seed).unwrap();
            assert_eq!(m.len(), 4);
            for (i, inst) in m.iter().enumerate() {
                assert_eq!(inst.demo_ids.len(), 2);
                assert_ne!(inst.demo_ids[0], inst.demo_ids[1]);
                assert!(inst.demo_ids.iter().all(|id| *id < 3));
                if i < 3 {
                    assert_eq!(inst.query_source, QuerySource::Original);
                    assert_eq!(inst.query_id, i as u64);
                    // Only one pair excludes the query: the other two ids.
                    let mut got = inst.demo_ids.clone();
                    got.sort_unstable();
                    let want: Vec<u64> = (0..3).filter(|&x| x != i as u64).collect();
                    assert_eq!(got, want);
                } else {
                    assert_eq!(inst.query_source, QuerySource::Augmented);
                }
            }
        }
        let zero = build_training_mixture(&d3, &dt, 0, 1).unwrap();
        assert!(zero.iter().all(|i| i.demo_ids.is_empty()));
        assert!(build_training_mixture(&d3, &dt, 3, 1).is_err());
    }

    #[test]
    fn decorrelation_counts() {
        let s = schema(&[("sex", Role::Sensitive), ("income", Role::Label)], None);
        let mut rows: Vec<[&str; 2]> = Vec::new();
        rows.extend(std::iter::repeat(["M", "1"]).take(8));
        rows.extend(std::iter::repeat(["M", "0"]).take(2));
        rows.extend(std::iter::repeat(["F", "1"]).take(5));
        rows.extend(std::iter::repeat(["F", "0"]).take(5));
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        let d = dataset(s.clone(), &refs);
        let rep = decorrelation_report(&d).unwrap();
        assert!((rep.gap - 0.3).abs() < 1e-12);

        let same = dataset(s.clone(), &[&["M", "1"], &["M", "0"], &["F", "1"], &["F", "0"]]);
        assert_eq!(decorrelation_report(&same).unwrap().gap, 0.0);

        let mut absent = dataset(s, &[&["M", "1"]]);
        absent.schema.attributes[0].domain.push(Value::cat("F"));
        absent.schema.attributes[0].domain.sort();
        assert!(matches!(decorrelation_report(&absent), Err(Error::GroupAbsent(g)) if g == "F"));
    }
}
