//! Shared embedding tables.
//!
//! Every categorical (or pre-bucketed numeric) field owns one table of shape
//! `[vocab_size × embed_dim]`. A sample embeds as the concatenation of its
//! looked-up rows in schema order; all towers of a model read the same tables.
//! Gradients are kept row-sparse so a step touches only rows the batch used.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{AdagradState, LrSchedule};
use crate::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Out-of-range ids map to the reserved row 0.
    #[default]
    ReservedBucket,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, vocab_size: usize, embed_dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab_size,
            embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    fields: Vec<FieldSpec>,
    #[serde(default)]
    oov_policy: OovPolicy,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>, oov_policy: OovPolicy) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Schema("schema has no fields".into()));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.vocab_size == 0 || f.embed_dim == 0 {
                return Err(Error::Schema(format!(
                    "field `{}` needs vocab_size >= 1 and embed_dim >= 1",
                    f.name
                )));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Schema(format!("duplicate field `{}`", f.name)));
            }
        }
        Ok(Self { fields, oov_policy })
    }

    /// Re-runs the constructor checks; used after deserialisation.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.fields.clone(), self.oov_policy).map(|_| ())
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov_policy
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Length of an embedded sample: the sum of field dimensions.
    pub fn total_dim(&self) -> usize {
        self.fields.iter().map(|f| f.embed_dim).sum()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Short stable fingerprint over names, vocabularies, dims and OOV policy.
    pub fn hash(&self) -> String {
        let mut canon = String::new();
        for f in &self.fields {
            let _ = write!(canon, "{}:{}:{};", f.name, f.vocab_size, f.embed_dim);
        }
        let _ = write!(canon, "oov={:?}", self.oov_policy);
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Resolves a raw id for `field` to a table row under the OOV policy.
    pub fn resolve(&self, field: usize, id: u32) -> Result<usize> {
        let spec = &self.fields[field];
        let id = id as usize;
        if id < spec.vocab_size {
            return Ok(id);
        }
        match self.oov_policy {
            OovPolicy::ReservedBucket => Ok(0),
            OovPolicy::Reject => Err(Error::Input(format!(
                "id {id} out of range for field `{}` (vocab {})",
                spec.name, spec.vocab_size
            ))),
        }
    }

    /// Orders named `(field, id)` pairs by schema position. Every schema field
    /// must appear exactly once.
    pub fn order_ids(&self, named: &[(&str, u32)]) -> Result<Vec<u32>> {
        let mut ids: Vec<Option<u32>> = vec![None; self.fields.len()];
        for &(name, id) in named {
            let idx = self
                .field_index(name)
                .ok_or_else(|| Error::Schema(format!("unknown field `{name}`")))?;
            if ids[idx].replace(id).is_some() {
                return Err(Error::Schema(format!("field `{name}` given twice")));
            }
        }
        ids.into_iter()
            .zip(&self.fields)
            .map(|(id, f)| id.ok_or_else(|| Error::Schema(format!("missing field `{}`", f.name))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vocab_size: usize,
    embed_dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.embed_dim..(row + 1) * self.embed_dim]
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// One table per schema field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    tables: Vec<EmbeddingTable>,
}

impl EmbeddingTables {
    pub fn zeros(schema: &FeatureSchema) -> Self {
        Self {
            tables: schema
                .fields()
                .iter()
                .map(|f| EmbeddingTable {
                    vocab_size: f.vocab_size,
                    embed_dim: f.embed_dim,
                    data: vec![0.0; f.vocab_size * f.embed_dim],
                })
                .collect(),
        }
    }

    /// Uniform in `±sqrt(6 / (vocab + dim))` per table.
    pub fn init<R: Rng + ?Sized>(schema: &FeatureSchema, rng: &mut R) -> Self {
        let mut t = Self::zeros(schema);
        for table in &mut t.tables {
            let limit = (6.0 / (table.vocab_size + table.embed_dim) as f64).sqrt();
            for v in &mut table.data {
                *v = rng.random_range(-limit..=limit);
            }
        }
        t
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [EmbeddingTable] {
        &mut self.tables
    }

    pub fn matches(&self, schema: &FeatureSchema) -> bool {
        self.tables.len() == schema.len()
            && self
                .tables
                .iter()
                .zip(schema.fields())
                .all(|(t, f)| t.vocab_size == f.vocab_size && t.embed_dim == f.embed_dim)
    }

    /// Concatenates the rows selected by `ids` (one id per field, schema order).
    pub fn embed(&self, schema: &FeatureSchema, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.len() != schema.len() {
            return Err(Error::Schema(format!(
                "sample has {} feature ids, schema has {} fields",
                ids.len(),
                schema.len()
            )));
        }
        let mut out = Vec::with_capacity(schema.total_dim());
        for (f, (&id, table)) in ids.iter().zip(&self.tables).enumerate() {
            let row = schema.resolve(f, id)?;
            out.extend_from_slice(table.row(row));
        }
        Ok(out)
    }

    /// As [`embed`](Self::embed) but keyed by field name.
    pub fn embed_named(&self, schema: &FeatureSchema, fields: &[(&str, u32)]) -> Result<Vec<f64>> {
        self.embed(schema, &schema.order_ids(fields)?)
    }

    pub fn groups<'a>(&'a self, schema: &FeatureSchema, out: &mut Vec<(String, &'a [f64])>) {
        for (t, f) in self.tables.iter().zip(schema.fields()) {
            out.push((format!("embedding.{}", f.name), &t.data));
        }
    }

    pub fn groups_mut<'a>(&'a mut self, schema: &FeatureSchema, out: &mut Vec<(String, &'a mut [f64])>) {
        for (t, f) in self.tables.iter_mut().zip(schema.fields()) {
            out.push((format!("embedding.{}", f.name), &mut t.data));
        }
    }

    /// Adagrad update of the rows present in `grad` only.
    pub fn apply_sparse(
        &mut self,
        grad: &EmbeddingGrad,
        states: &mut [AdagradState],
        schedule: &LrSchedule,
    ) -> Result<()> {
        if states.len() != self.tables.len() {
            return Err(Error::Shape(format!(
                "{} optimizer states for {} tables",
                states.len(),
                self.tables.len()
            )));
        }
        for (&(field, _), g) in &grad.rows {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    group: format!("embedding[{field}]"),
                });
            }
        }
        let lrs: Vec<f64> = states.iter().map(|s| schedule.lr_at(s.step_count())).collect();
        for (&(field, row), g) in &grad.rows {
            let table = &mut self.tables[field];
            let dim = table.embed_dim;
            let offset = row * dim;
            states[field].update_range(&mut table.data[offset..offset + dim], g, offset, lrs[field]);
        }
        for s in states.iter_mut() {
            s.advance();
        }
        Ok(())
    }
}

/// Row-sparse embedding gradient keyed by `(field, row)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingGrad {
    rows: BTreeMap<(usize, usize), Vec<f64>>,
}

impl EmbeddingGrad {
    pub fn new() -> Self {
        Self::default()
    }

    /// Splits `upstream` (gradient w.r.t. the concatenated embedding) by field
    /// and adds each slice onto the row that sample looked up.
    pub fn accumulate(&mut self, schema: &FeatureSchema, ids: &[u32], upstream: &[f64]) -> Result<()> {
        if upstream.len() != schema.total_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has length {}, embedding has {}",
                upstream.len(),
                schema.total_dim()
            )));
        }
        if ids.len() != schema.len() {
            return Err(Error::Schema("feature id count does not match schema".into()));
        }
        let mut offset = 0;
        for (f, (&id, spec)) in ids.iter().zip(schema.fields()).enumerate() {
            let row = schema.resolve(f, id)?;
            let slice = &upstream[offset..offset + spec.embed_dim];
            let entry = self
                .rows
                .entry((f, row))
                .or_insert_with(|| vec![0.0; spec.embed_dim]);
            for (e, g) in entry.iter_mut().zip(slice) {
                *e += g;
            }
            offset += spec.embed_dim;
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn row(&self, field: usize, row: usize) -> Option<&[f64]> {
        self.rows.get(&(field, row)).map(Vec::as_slice)
    }

    pub fn touched_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.rows.values_mut() {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    /// Dense copy in table layout, for comparisons against finite differences.
    pub fn to_dense(&self, schema: &FeatureSchema) -> Vec<Vec<f64>> {
        let mut dense: Vec<Vec<f64>> = schema
            .fields()
            .iter()
            .map(|f| vec![0.0; f.vocab_size * f.embed_dim])
            .collect();
        for (&(field, row), g) in &self.rows {
            let dim = schema.fields()[field].embed_dim;
            dense[field][row * dim..(row + 1) * dim].copy_from_slice(g);
        }
        dense
    }
}

/// Accumulates `upstream` for every sample in the batch, then applies one
/// row-sparse Adagrad step.
pub fn scatter_grad(
    upstream: &[Vec<f64>],
    sample_ids: &[Vec<u32>],
    schema: &FeatureSchema,
    tables: &mut EmbeddingTables,
    states: &mut [AdagradState],
    schedule: &LrSchedule,
) -> Result<()> {
    if upstream.len() != sample_ids.len() {
        return Err(Error::Shape("one upstream gradient per sample required".into()));
    }
    let mut grad = EmbeddingGrad::new();
    for (g, ids) in upstream.iter().zip(sample_ids) {
        grad.accumulate(schema, ids, g)?;
    }
    tables.apply_sparse(&grad, states, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adagrad_step, grad_check, Parameters};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema2() -> FeatureSchema {
        FeatureSchema::new(
            vec![FieldSpec::new("user", 3, 2), FieldSpec::new("item", 4, 3)],
            OovPolicy::ReservedBucket,
        )
        .unwrap()
    }

    fn tables(schema: &FeatureSchema, seed: u64) -> EmbeddingTables {
        EmbeddingTables::init(schema, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn states(schema: &FeatureSchema) -> Vec<AdagradState> {
        schema
            .fields()
            .iter()
            .map(|f| AdagradState::new(f.vocab_size * f.embed_dim, 0.0, 1e-8).unwrap())
            .collect()
    }

    #[test]
    fn single_field_lookup_selects_row() {
        let schema = FeatureSchema::new(vec![FieldSpec::new("f", 3, 2)], OovPolicy::Reject).unwrap();
        let t = tables(&schema, 1);
        assert_eq!(t.embed(&schema, &[1]).unwrap(), t.tables()[0].row(1).to_vec());
    }

    #[test]
    fn concatenation_preserves_field_order() {
        let schema = schema2();
        let t = tables(&schema, 2);
        let v = t.embed_named(&schema, &[("item", 2), ("user", 1)]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(&v[..2], t.tables()[0].row(1));
        assert_eq!(&v[2..], t.tables()[1].row(2));
    }

    #[test]
    fn schema_and_oov_errors() {
        let schema = schema2();
        let t = tables(&schema, 3);
        assert!(matches!(
            t.embed_named(&schema, &[("user", 0), ("bogus", 1)]),
            Err(Error::Schema(_))
        ));
        assert!(matches!(t.embed_named(&schema, &[("user", 0)]), Err(Error::Schema(_))));
        // reserved bucket: id 9 reads row 0
        assert_eq!(
            t.embed(&schema, &[9, 0]).unwrap(),
            t.embed(&schema, &[0, 0]).unwrap()
        );
        let strict = FeatureSchema::new(schema.fields().to_vec(), OovPolicy::Reject).unwrap();
        assert!(matches!(t.embed(&strict, &[9, 0]), Err(Error::Input(_))));
        assert!(FeatureSchema::new(
            vec![FieldSpec::new("a", 1, 1), FieldSpec::new("a", 2, 1)],
            OovPolicy::Reject
        )
        .is_err());
        assert!(FeatureSchema::new(vec![FieldSpec::new("a", 0, 1)], OovPolicy::Reject).is_err());
    }

    struct TablesOnly<'s> {
        schema: &'s FeatureSchema,
        tables: EmbeddingTables,
    }

    impl Parameters for TablesOnly<'_> {
        fn param_groups(&self) -> Vec<(String, &[f64])> {
            let mut out = Vec::new();
            self.tables.groups(self.schema, &mut out);
            out
        }
        fn param_groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
            let mut out = Vec::new();
            self.tables.groups_mut(self.schema, &mut out);
            out
        }
    }

    #[test]
    fn finite_differences_touch_only_looked_up_rows() {
        let schema = schema2();
        let ids = [2u32, 1];
        let coef: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
        let loss = |p: &TablesOnly| -> f64 {
            let e = p.tables.embed(p.schema, &ids).unwrap();
            e.iter().zip(&coef).map(|(x, c)| c * x * x).sum()
        };
        let mut p = TablesOnly {
            schema: &schema,
            tables: tables(&schema, 4),
        };
        let e = p.tables.embed(&schema, &ids).unwrap();
        let upstream: Vec<f64> = e.iter().zip(&coef).map(|(x, c)| 2.0 * c * x).collect();
        let mut grad = EmbeddingGrad::new();
        grad.accumulate(&schema, &ids, &upstream).unwrap();
        let dense = grad.to_dense(&schema);
        let report = grad_check(&mut p, &dense, 1e-5, loss);
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
        // every non-looked-up entry has zero gradient analytically
        for (f, d) in dense.iter().enumerate() {
            let dim = schema.fields()[f].embed_dim;
            for (i, v) in d.iter().enumerate() {
                if i / dim != ids[f] as usize {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        // perturbing an untouched row leaves the output unchanged
        let before = p.tables.embed(&schema, &ids).unwrap();
        p.tables.tables_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(p.tables.embed(&schema, &ids).unwrap(), before);
    }

    #[test]
    fn single_id_batch_changes_one_row_per_field() {
        let schema = FeatureSchema::new(vec![FieldSpec::new("f", 5, 2)], OovPolicy::Reject).unwrap();
        let mut t = tables(&schema, 5);
        let before = t.clone();
        let mut st = states(&schema);
        let sched = LrSchedule::new(0.1, 0).unwrap();
        scatter_grad(&[vec![0.5, -0.5]], &[vec![3]], &schema, &mut t, &mut st, &sched).unwrap();
        for r in 0..5 {
            let same = t.tables()[0].row(r) == before.tables()[0].row(r);
            assert_eq!(same, r != 3, "row {r}");
        }
    }

    #[test]
    fn repeated_ids_accumulate_before_update() {
        let schema = FeatureSchema::new(vec![FieldSpec::new("f", 2, 1)], OovPolicy::Reject).unwrap();
        let sched = LrSchedule::new(0.1, 0).unwrap();
        let mut a = tables(&schema, 6);
        let mut b = a.clone();
        let mut sa = states(&schema);
        let mut sb = states(&schema);
        scatter_grad(&[vec![0.3], vec![0.9]], &[vec![1], vec![1]], &schema, &mut a, &mut sa, &sched)
            .unwrap();
        scatter_grad(&[vec![1.2]], &[vec![1]], &schema, &mut b, &mut sb, &sched).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn sparse_update_equals_dense_when_all_rows_touched() {
        let schema = schema2();
        let sched = LrSchedule::new(0.05, 3).unwrap();
        let mut sparse = tables(&schema, 7);
        let mut dense = sparse.clone();
        let mut s_states = states(&schema);
        let mut d_states = states(&schema);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..4 {
            let ids: Vec<Vec<u32>> = (0..4).map(|i| vec![(i % 3) as u32, i as u32]).collect();
            let ups: Vec<Vec<f64>> = ids
                .iter()
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let mut grad = EmbeddingGrad::new();
            for (i, u) in ids.iter().zip(&ups) {
                grad.accumulate(&schema, i, u).unwrap();
            }
            let full = grad.to_dense(&schema);
            sparse.apply_sparse(&grad, &mut s_states, &sched).unwrap();
            for (f, g) in full.iter().enumerate() {
                adagrad_step(dense.tables_mut()[f].data_mut(), g, &mut d_states[f], &sched).unwrap();
            }
        }
        for (a, b) in sparse.tables().iter().zip(dense.tables()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn schema_hash_is_stable_and_sensitive() {
        let a = schema2();
        assert_eq!(a.hash(), schema2().hash());
        assert_eq!(a.hash().len(), 16);
        let b = FeatureSchema::new(
            vec![FieldSpec::new("user", 3, 2), FieldSpec::new("item", 5, 3)],
            OovPolicy::ReservedBucket,
        )
        .unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
