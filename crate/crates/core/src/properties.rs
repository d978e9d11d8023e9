//! Property schemas, property vectors and the aspect-matching predicate.
//!
//! A data point is described by a complete assignment of categorical values
//! to the properties of a schema. An *aspect* is a set of `(property, value)`
//! pairs that the query shares with exactly one support element.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(property_name, value)` pair.
pub type Pair = (String, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyDef {
    pub name: String,
    pub domain: Vec<String>,
}

/// Ordered list of categorical properties, one of which names the object type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySchema {
    pub name: String,
    pub object_property: String,
    pub properties: Vec<PropertyDef>,
}

impl PropertySchema {
    pub fn new(
        name: impl Into<String>,
        object_property: impl Into<String>,
        properties: Vec<PropertyDef>,
    ) -> Result<Self> {
        let schema = Self {
            name: name.into(),
            object_property: object_property.into(),
            properties,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for prop in &self.properties {
            if !seen.insert(prop.name.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate property `{}`",
                    prop.name
                )));
            }
            if prop.domain.len() < 2 {
                return Err(Error::InvalidSchema(format!(
                    "property `{}` needs at least two values",
                    prop.name
                )));
            }
            let distinct: BTreeSet<_> = prop.domain.iter().collect();
            if distinct.len() != prop.domain.len() {
                return Err(Error::InvalidSchema(format!(
                    "property `{}` has repeated domain values",
                    prop.name
                )));
            }
        }
        if !seen.contains(self.object_property.as_str()) {
            return Err(Error::InvalidSchema(format!(
                "object property `{}` is not a schema property",
                self.object_property
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyDef> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn domain(&self, name: &str) -> Option<&[String]> {
        self.property(name).map(|p| p.domain.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.properties.iter().map(|p| p.name.as_str())
    }

    /// Properties other than the object property, in schema order.
    pub fn non_object(&self) -> impl Iterator<Item = &PropertyDef> {
        self.properties
            .iter()
            .filter(move |p| p.name != self.object_property)
    }

    /// Number of distinct complete property vectors.
    pub fn combination_count(&self) -> usize {
        self.properties.iter().map(|p| p.domain.len()).product()
    }

    /// Enumerates every property vector in mixed-radix order (last property fastest).
    pub fn all_vectors(&self) -> Vec<PropertyVector> {
        let total = self.combination_count();
        let mut out = Vec::with_capacity(total);
        for mut index in 0..total {
            let mut values = BTreeMap::new();
            for prop in self.properties.iter().rev() {
                let radix = prop.domain.len();
                values.insert(prop.name.clone(), prop.domain[index % radix].clone());
                index /= radix;
            }
            out.push(PropertyVector {
                schema: self.name.clone(),
                values,
            });
        }
        out
    }

    /// The geometric shapes schema: four polygon types, five colors, three
    /// outline thicknesses and four fill patterns.
    pub fn geometric_shapes() -> Self {
        let def = |name: &str, values: &[&str]| PropertyDef {
            name: name.to_string(),
            domain: values.iter().map(|v| v.to_string()).collect(),
        };
        Self {
            name: "geometric_shapes".into(),
            object_property: "shape".into(),
            properties: vec![
                def("shape", &["triangle", "square", "pentagon", "hexagon"]),
                def("color", &["red", "green", "blue", "yellow", "purple"]),
                def("thickness", &["thin", "medium", "thick"]),
                def("pattern", &["solid", "stripes", "dots", "checker"]),
            ],
        }
    }

    /// Sprite characters: body type is the object; stance and clothing/hair
    /// colors are the candidate aspects.
    pub fn sprites() -> Self {
        let def = |name: &str, values: &[&str]| PropertyDef {
            name: name.to_string(),
            domain: values.iter().map(|v| v.to_string()).collect(),
        };
        Self {
            name: "sprites".into(),
            object_property: "body_type".into(),
            properties: vec![
                def("body_type", &["light", "dark", "tanned", "orc", "skeleton"]),
                def("stance", &["stand", "walk", "slash", "spellcast", "shoot"]),
                def("shirt_color", &["white", "red", "blue", "green", "brown"]),
                def("pants_color", &["white", "red", "blue", "green", "brown"]),
                def("hair_color", &["blonde", "black", "brown", "red", "gray"]),
            ],
        }
    }
}

/// Complete assignment of in-domain values to every schema property.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PropertyVector {
    pub schema: String,
    pub values: BTreeMap<String, String>,
}

impl PropertyVector {
    pub fn new(schema: &PropertySchema, values: BTreeMap<String, String>) -> Result<Self> {
        let v = Self {
            schema: schema.name.clone(),
            values,
        };
        v.validate(schema)?;
        Ok(v)
    }

    pub fn from_pairs<'a>(
        schema: &PropertySchema,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let values = pairs
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self::new(schema, values)
    }

    pub fn validate(&self, schema: &PropertySchema) -> Result<()> {
        if self.schema != schema.name {
            return Err(Error::SchemaMismatch {
                expected: schema.name.clone(),
                found: self.schema.clone(),
            });
        }
        for prop in &schema.properties {
            match self.values.get(&prop.name) {
                None => {
                    return Err(Error::InvalidVector(format!(
                        "missing property `{}`",
                        prop.name
                    )))
                }
                Some(value) if !prop.domain.contains(value) => {
                    return Err(Error::UnknownValue {
                        property: prop.name.clone(),
                        value: value.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self
            .values
            .keys()
            .find(|k| schema.property(k.as_str()).is_none())
        {
            return Err(Error::InvalidVector(format!("unknown property `{extra}`")));
        }
        Ok(())
    }

    pub fn get(&self, property: &str) -> Option<&str> {
        self.values.get(property).map(String::as_str)
    }

    /// Copy with one property replaced.
    pub fn with(&self, property: &str, value: &str) -> Self {
        let mut out = self.clone();
        out.values.insert(property.to_string(), value.to_string());
        out
    }

    /// Compact `k=v,k=v` rendering, sorted by property name.
    pub fn key(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Result of the aspect oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectMatch {
    pub matched_index: Option<usize>,
    pub witness: BTreeSet<Pair>,
}

fn check_same_schema(a: &PropertyVector, b: &PropertyVector) -> Result<()> {
    if a.schema != b.schema {
        return Err(Error::SchemaMismatch {
            expected: a.schema.clone(),
            found: b.schema.clone(),
        });
    }
    Ok(())
}

/// The `(name, value)` pairs on which `a` and `b` agree.
pub fn shared_pairs(a: &PropertyVector, b: &PropertyVector) -> Result<BTreeSet<Pair>> {
    check_same_schema(a, b)?;
    Ok(a.values
        .iter()
        .filter(|(k, v)| b.values.get(*k) == Some(*v))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect())
}

/// Finds the support element that shares an aspect with the query.
///
/// The witness collects every pair the query shares with exactly one support
/// element. The match is only reported when all witness pairs point at the
/// same element; otherwise the episode is ambiguous and `matched_index` is `None`.
pub fn aspect_oracle(query: &PropertyVector, support: &[PropertyVector]) -> Result<AspectMatch> {
    if support.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "support set needs at least two elements, got {}",
            support.len()
        )));
    }
    let shared = support
        .iter()
        .map(|s| shared_pairs(query, s))
        .collect::<Result<Vec<_>>>()?;

    let mut owners: BTreeMap<&Pair, Vec<usize>> = BTreeMap::new();
    for (i, pairs) in shared.iter().enumerate() {
        for pair in pairs {
            owners.entry(pair).or_default().push(i);
        }
    }

    let mut witness = BTreeSet::new();
    let mut targets = BTreeSet::new();
    for (pair, idx) in owners {
        if let [only] = idx.as_slice() {
            witness.insert(pair.clone());
            targets.insert(*only);
        }
    }
    let matched_index = match targets.len() {
        1 => targets.into_iter().next(),
        _ => None,
    };
    Ok(AspectMatch {
        matched_index,
        witness,
    })
}

/// Outcome of the semantic episode checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeDiagnostics {
    /// The query's object value differs from every support object value.
    pub object_disjoint: bool,
    /// The single non-object property varying across the support set, if
    /// exactly one varies (with pairwise-distinct values) and all others are constant.
    pub varying_property: Option<String>,
    pub oracle: Option<AspectMatch>,
    pub messages: Vec<String>,
}

impl EpisodeDiagnostics {
    pub fn passed(&self) -> bool {
        self.object_disjoint
            && self.varying_property.is_some()
            && self
                .oracle
                .as_ref()
                .is_some_and(|m| m.matched_index.is_some())
    }
}

/// Checks an episode against the support-set constraints. Never fails; all
/// problems are reported in the diagnostics.
pub fn validate_episode_semantics(
    schema: &PropertySchema,
    query: &PropertyVector,
    support: &[PropertyVector],
) -> EpisodeDiagnostics {
    let mut messages = Vec::new();

    for (i, v) in std::iter::once(query).chain(support).enumerate() {
        if let Err(e) = v.validate(schema) {
            messages.push(format!("element {i}: {e}"));
        }
    }
    if !messages.is_empty() {
        return EpisodeDiagnostics {
            object_disjoint: false,
            varying_property: None,
            oracle: None,
            messages,
        };
    }

    let obj = schema.object_property.as_str();
    let query_obj = query.get(obj);
    let object_disjoint = support.iter().all(|s| s.get(obj) != query_obj);
    if !object_disjoint {
        messages.push(format!("query shares its `{obj}` value with the support set"));
    }

    let mut varying = Vec::new();
    for prop in schema.non_object() {
        let values: Vec<_> = support.iter().map(|s| s.get(&prop.name)).collect();
        let distinct: BTreeSet<_> = values.iter().collect();
        if distinct.len() > 1 {
            varying.push((prop.name.clone(), distinct.len() == values.len()));
        }
    }
    let varying_property = match varying.as_slice() {
        [(name, true)] => Some(name.clone()),
        [(name, false)] => {
            messages.push(format!("`{name}` varies but repeats values across the support set"));
            None
        }
        [] => {
            messages.push("no property varies across the support set".into());
            None
        }
        many => {
            let names: Vec<_> = many.iter().map(|(n, _)| n.as_str()).collect();
            messages.push(format!("multiple varying properties: {}", names.join(", ")));
            None
        }
    };

    let oracle = match aspect_oracle(query, support) {
        Ok(m) => {
            if m.matched_index.is_none() {
                messages.push("aspect oracle found no unambiguous match".into());
            }
            Some(m)
        }
        Err(e) => {
            messages.push(e.to_string());
            None
        }
    };

    EpisodeDiagnostics {
        object_disjoint,
        varying_property,
        oracle,
        messages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schema() -> PropertySchema {
        PropertySchema::new(
            "small",
            "shape",
            vec![
                PropertyDef {
                    name: "shape".into(),
                    domain: vec!["tri".into(), "sq".into(), "hex".into()],
                },
                PropertyDef {
                    name: "color".into(),
                    domain: vec!["red".into(), "blue".into(), "green".into()],
                },
                PropertyDef {
                    name: "thick".into(),
                    domain: vec!["thin".into(), "wide".into()],
                },
                PropertyDef {
                    name: "pat".into(),
                    domain: vec!["dots".into(), "stripes".into(), "solid".into()],
                },
            ],
        )
        .unwrap()
    }

    fn v(schema: &PropertySchema, shape: &str, color: &str, thick: &str, pat: &str) -> PropertyVector {
        PropertyVector::from_pairs(
            schema,
            [("shape", shape), ("color", color), ("thick", thick), ("pat", pat)],
        )
        .unwrap()
    }

    /// Independent oracle: walk every (pair in the full schema domain,
    /// support element) combination and record which elements share it with the query.
    fn brute_force(
        schema: &PropertySchema,
        query: &PropertyVector,
        support: &[PropertyVector],
    ) -> (Option<usize>, BTreeSet<Pair>) {
        let mut witness = BTreeSet::new();
        let mut owners = BTreeSet::new();
        for prop in &schema.properties {
            for value in &prop.domain {
                let holds = |x: &PropertyVector| x.values[&prop.name] == *value;
                if !holds(query) {
                    continue;
                }
                let hits: Vec<usize> = (0..support.len()).filter(|&i| holds(&support[i])).collect();
                if hits.len() == 1 {
                    witness.insert((prop.name.clone(), value.clone()));
                    owners.insert(hits[0]);
                }
            }
        }
        let idx = if owners.len() == 1 { owners.into_iter().next() } else { None };
        (idx, witness)
    }

    #[test]
    fn schema_rejects_bad_definitions() {
        let one_value = PropertySchema::new(
            "s",
            "a",
            vec![
                PropertyDef { name: "a".into(), domain: vec!["x".into(), "y".into()] },
                PropertyDef { name: "b".into(), domain: vec!["x".into()] },
            ],
        );
        assert!(matches!(one_value, Err(Error::InvalidSchema(_))));
        let missing_object = PropertySchema::new(
            "s",
            "z",
            vec![PropertyDef { name: "a".into(), domain: vec!["x".into(), "y".into()] }],
        );
        assert!(matches!(missing_object, Err(Error::InvalidSchema(_))));
        let dup = PropertySchema::new(
            "s",
            "a",
            vec![
                PropertyDef { name: "a".into(), domain: vec!["x".into(), "y".into()] },
                PropertyDef { name: "a".into(), domain: vec!["x".into(), "y".into()] },
            ],
        );
        assert!(matches!(dup, Err(Error::InvalidSchema(_))));
    }

    #[test]
    fn schema_json_layout() {
        let schema = PropertySchema::geometric_shapes();
        let json = serde_json::to_value(&schema).unwrap();
        assert_eq!(json["object_property"], "shape");
        assert_eq!(json["properties"][1]["name"], "color");
        assert_eq!(json["properties"][1]["domain"][0], "red");
        let back = PropertySchema::from_json(&json.to_string()).unwrap();
        assert_eq!(back, schema);
        assert_eq!(schema.combination_count(), 240);
        assert_eq!(schema.all_vectors().len(), 240);
    }

    #[test]
    fn vectors_reject_out_of_domain_and_incomplete() {
        let s = small_schema();
        let bad = PropertyVector::from_pairs(&s, [("shape", "tri"), ("color", "pink"), ("thick", "thin"), ("pat", "dots")]);
        assert!(matches!(bad, Err(Error::UnknownValue { .. })));
        let incomplete = PropertyVector::from_pairs(&s, [("shape", "tri"), ("color", "red")]);
        assert!(matches!(incomplete, Err(Error::InvalidVector(_))));
    }

    #[test]
    fn shared_pairs_examples() {
        let s = small_schema();
        let a = v(&s, "tri", "red", "thin", "dots");
        let b = v(&s, "tri", "red", "wide", "dots");
        let all: BTreeSet<Pair> = a.values.clone().into_iter().collect();
        assert_eq!(shared_pairs(&a, &a).unwrap(), all);

        let c = v(&s, "sq", "blue", "wide", "stripes");
        assert!(shared_pairs(&a, &c).unwrap().is_empty());

        let expected: BTreeSet<Pair> = [("color", "red"), ("pat", "dots"), ("shape", "tri")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        assert_eq!(shared_pairs(&a, &b).unwrap(), expected);
    }

    #[test]
    fn shared_pairs_schema_mismatch() {
        let s = small_schema();
        let a = v(&s, "tri", "red", "thin", "dots");
        let mut b = a.clone();
        b.schema = "other".into();
        assert!(matches!(shared_pairs(&a, &b), Err(Error::SchemaMismatch { .. })));
        assert!(aspect_oracle(&a, &[b.clone(), b]).is_err());
    }

    #[test]
    fn oracle_single_match() {
        let s = small_schema();
        let q = v(&s, "tri", "red", "thin", "stripes");
        let support = vec![
            v(&s, "sq", "red", "thin", "dots"),
            v(&s, "sq", "red", "thin", "stripes"),
            v(&s, "sq", "red", "thin", "solid"),
        ];
        let m = aspect_oracle(&q, &support).unwrap();
        let (bf_idx, bf_witness) = brute_force(&s, &q, &support);
        assert_eq!(m.matched_index, Some(1));
        assert_eq!(bf_idx, Some(1));
        assert_eq!(m.witness, bf_witness);
        assert_eq!(m.witness.len(), 1);
    }

    #[test]
    fn oracle_no_shared_pairs() {
        let s = small_schema();
        let q = v(&s, "tri", "red", "thin", "stripes");
        let support = vec![v(&s, "sq", "blue", "wide", "dots"), v(&s, "hex", "green", "wide", "solid")];
        let m = aspect_oracle(&q, &support).unwrap();
        assert_eq!(m.matched_index, None);
        assert!(m.witness.is_empty());
    }

    #[test]
    fn oracle_ambiguous() {
        let s = small_schema();
        let q = v(&s, "tri", "red", "thin", "dots");
        let support = vec![
            v(&s, "sq", "red", "wide", "solid"),
            v(&s, "sq", "blue", "wide", "solid"),
            v(&s, "sq", "green", "wide", "dots"),
        ];
        let m = aspect_oracle(&q, &support).unwrap();
        let (bf_idx, bf_witness) = brute_force(&s, &q, &support);
        assert_eq!(m.matched_index, None);
        assert_eq!(bf_idx, None);
        assert!(m.witness.contains(&("color".to_string(), "red".to_string())));
        assert!(m.witness.contains(&("pat".to_string(), "dots".to_string())));
        assert_eq!(m.witness, bf_witness);
    }

    #[test]
    fn oracle_needs_two_support_elements() {
        let s = small_schema();
        let q = v(&s, "tri", "red", "thin", "dots");
        assert!(aspect_oracle(&q, &[q.clone()]).is_err());
    }

    #[test]
    fn validation_flags_each_constraint() {
        let s = small_schema();
        let q = v(&s, "tri", "red", "thin", "stripes");
        let good = vec![
            v(&s, "sq", "red", "thin", "dots"),
            v(&s, "sq", "red", "thin", "stripes"),
            v(&s, "sq", "red", "thin", "solid"),
        ];
        let d = validate_episode_semantics(&s, &q, &good);
        assert!(d.passed(), "{:?}", d.messages);
        assert_eq!(d.varying_property.as_deref(), Some("pat"));

        let two_varying = vec![
            v(&s, "sq", "red", "thin", "dots"),
            v(&s, "sq", "blue", "thin", "stripes"),
            v(&s, "sq", "red", "thin", "solid"),
        ];
        let d = validate_episode_semantics(&s, &q, &two_varying);
        assert!(!d.passed());
        assert!(d.varying_property.is_none());
        assert!(d.object_disjoint);

        let same_object = vec![
            v(&s, "tri", "red", "thin", "dots"),
            v(&s, "sq", "red", "thin", "stripes"),
            v(&s, "sq", "red", "thin", "solid"),
        ];
        let d = validate_episode_semantics(&s, &q, &same_object);
        assert!(!d.passed());
        assert!(!d.object_disjoint);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_vector(s: PropertySchema) -> impl Strategy<Value = PropertyVector> {
            let sizes: Vec<usize> = s.properties.iter().map(|p| p.domain.len()).collect();
            sizes
                .into_iter()
                .map(|n| 0..n)
                .collect::<Vec<_>>()
                .prop_map(move |idx| {
                    let values = s
                        .properties
                        .iter()
                        .zip(idx)
                        .map(|(p, i)| (p.name.clone(), p.domain[i].clone()))
                        .collect();
                    PropertyVector { schema: s.name.clone(), values }
                })
        }

        proptest! {
            #[test]
            fn shared_pairs_symmetric(a in arb_vector(small_schema()), b in arb_vector(small_schema())) {
                prop_assert_eq!(shared_pairs(&a, &b).unwrap(), shared_pairs(&b, &a).unwrap());
                prop_assert_eq!(shared_pairs(&a, &a).unwrap().len(), a.values.len());
            }

            #[test]
            fn oracle_matches_brute_force(
                q in arb_vector(small_schema()),
                support in proptest::collection::vec(arb_vector(small_schema()), 2..6),
            ) {
                let s = small_schema();
                let m = aspect_oracle(&q, &support).unwrap();
                let (idx, witness) = brute_force(&s, &q, &support);
                prop_assert_eq!(m.matched_index, idx);
                prop_assert_eq!(m.witness, witness);
            }

            #[test]
            fn oracle_is_permutation_equivariant(
                q in arb_vector(small_schema()),
                support in proptest::collection::vec(arb_vector(small_schema()), 2..6),
                rot in 0usize..6,
            ) {
                let n = support.len();
                let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
                let permuted: Vec<_> = perm.iter().map(|&i| support[i].clone()).collect();
                let a = aspect_oracle(&q, &support).unwrap();
                let b = aspect_oracle(&q, &permuted).unwrap();
                prop_assert_eq!(&a.witness, &b.witness);
                prop_assert_eq!(a.matched_index, b.matched_index.map(|j| perm[j]));
            }
        }
    }
}
