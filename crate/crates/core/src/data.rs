//! LETOR datasets: parsing, serialization, candidate restriction and a
//! synthetic generator with known feature roles.
//!
//! Text format, one document per line:
//!
//! ```text
//! <label> qid:<qid> <fid>:<value> ... [# comment]
//! ```
//!
//! Feature ids are 1-based in files and 0-based everywhere in memory.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Labels above this are clamped so that `2^label` stays well inside `f64`.
pub const MAX_LABEL: u32 = 31;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub features: Vec<f64>,
    pub label: u32,
    pub doc_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub qid: String,
    pub documents: Vec<Document>,
}

impl Query {
    pub fn labels(&self) -> Vec<u32> {
        self.documents.iter().map(|d| d.label).collect()
    }

    /// Documents as a `docs x d` matrix.
    pub fn feature_matrix(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.documents.iter().map(|d| d.features.clone()).collect();
        Tensor::from_rows(&rows).expect("query has documents with equal widths")
    }

    pub fn has_relevant(&self) -> bool {
        self.documents.iter().any(|d| d.label > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub feature_count: usize,
}

impl QuerySet {
    /// Checks the structural invariants: non-empty queries, width `d`
    /// everywhere and unique qids.
    pub fn new(queries: Vec<Query>, feature_count: usize) -> Result<Self> {
        if feature_count == 0 {
            return Err(Error::InvalidArgument(
                "feature_count must be positive".into(),
            ));
        }
        let mut seen = HashMap::new();
        for q in &queries {
            if q.documents.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "query {} has no documents",
                    q.qid
                )));
            }
            if seen.insert(q.qid.as_str(), ()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate qid {}", q.qid)));
            }
            if let Some(doc) = q
                .documents
                .iter()
                .find(|d| d.features.len() != feature_count)
            {
                return Err(Error::InvalidArgument(format!(
                    "query {}: document has {} features, expected {feature_count}",
                    q.qid,
                    doc.features.len()
                )));
            }
        }
        Ok(QuerySet {
            queries,
            feature_count,
        })
    }

    pub fn num_documents(&self) -> usize {
        self.queries.iter().map(|q| q.documents.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Keeps only the given columns, in the given order.
    pub fn project(&self, features: &[usize]) -> Result<QuerySet> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("empty feature subset".into()));
        }
        if let Some(&bad) = features.iter().find(|&&f| f >= self.feature_count) {
            return Err(Error::InvalidArgument(format!(
                "feature index {bad} out of range for d={}",
                self.feature_count
            )));
        }
        let queries = self
            .queries
            .iter()
            .map(|q| Query {
                qid: q.qid.clone(),
                documents: q
                    .documents
                    .iter()
                    .map(|d| Document {
                        features: features.iter().map(|&f| d.features[f]).collect(),
                        label: d.label,
                        doc_id: d.doc_id.clone(),
                    })
                    .collect(),
            })
            .collect();
        Ok(QuerySet {
            queries,
            feature_count: features.len(),
        })
    }

    /// Pads every document with zeros up to `d` features. Files parsed
    /// separately may disagree on the largest feature id.
    pub fn widen(mut self, d: usize) -> Result<QuerySet> {
        if d < self.feature_count {
            return Err(Error::InvalidArgument(format!(
                "cannot narrow {} features to {d}",
                self.feature_count
            )));
        }
        for q in &mut self.queries {
            for doc in &mut q.documents {
                doc.features.resize(d, 0.0);
            }
        }
        self.feature_count = d;
        Ok(self)
    }

    /// Values of one feature over every document, in query order.
    pub fn column(&self, feature: usize) -> Vec<f64> {
        self.queries
            .iter()
            .flat_map(|q| q.documents.iter().map(move |d| d.features[feature]))
            .collect()
    }
}

fn parse_label(token: &str, line: usize) -> Result<u32> {
    let value: f64 = token.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("non-numeric label {token:?}"),
    })?;
    if !value.is_finite() || value < 0.0 || value.fract() != 0.0 {
        return Err(Error::Parse {
            line,
            msg: format!("label must be a non-negative integer, got {token:?}"),
        });
    }
    if value > MAX_LABEL as f64 {
        log::warn!("line {line}: label {value} capped at {MAX_LABEL}");
        return Ok(MAX_LABEL);
    }
    Ok(value as u32)
}

/// Parses LETOR text into a [`QuerySet`].
///
/// Documents are grouped by qid in order of first appearance; missing
/// feature ids read as `0.0` and `feature_count` is the largest id seen.
pub fn parse_letor<R: BufRead>(reader: R) -> Result<QuerySet> {
    let mut queries: Vec<Query> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut max_fid = 0usize;
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut slots: Vec<(usize, usize)> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let (body, comment) = match line.split_once('#') {
            Some((b, c)) => (b, Some(c.trim())),
            None => (line.as_str(), None),
        };
        let mut tokens = body.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label = parse_label(label_tok, lineno)?;
        let qid = tokens
            .next()
            .and_then(|t| t.strip_prefix("qid:"))
            .filter(|q| !q.is_empty())
            .ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "expected qid:<id> after the label".into(),
            })?;

        let mut feats = Vec::new();
        for tok in tokens {
            let (fid, value) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("malformed feature token {tok:?}"),
            })?;
            let fid: usize = fid.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("non-integer feature id {fid:?}"),
            })?;
            if fid == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "feature ids are 1-based".into(),
                });
            }
            let value: f64 = value.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("non-numeric value {value:?} for feature {fid}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite value for feature {fid}"),
                });
            }
            if feats.iter().any(|&(f, _)| f == fid - 1) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("duplicate feature id {fid}"),
                });
            }
            max_fid = max_fid.max(fid);
            feats.push((fid - 1, value));
        }

        let qi = *index.entry(qid.to_string()).or_insert_with(|| {
            queries.push(Query {
                qid: qid.to_string(),
                documents: Vec::new(),
            });
            queries.len() - 1
        });
        slots.push((qi, queries[qi].documents.len()));
        queries[qi].documents.push(Document {
            features: Vec::new(),
            label,
            doc_id: comment.filter(|c| !c.is_empty()).map(str::to_string),
        });
        sparse.push(feats);
    }

    if queries.is_empty() {
        return Err(Error::EmptyInput("no documents in LETOR input".into()));
    }
    if max_fid == 0 {
        return Err(Error::EmptyInput("no feature values in LETOR input".into()));
    }
    for ((qi, di), feats) in slots.into_iter().zip(sparse) {
        let mut dense = vec![0.0; max_fid];
        for (f, v) in feats {
            dense[f] = v;
        }
        queries[qi].documents[di].features = dense;
    }
    QuerySet::new(queries, max_fid)
}

pub fn parse_letor_str(text: &str) -> Result<QuerySet> {
    parse_letor(text.as_bytes())
}

/// Writes every feature densely; `parse_letor` inverts this exactly.
pub fn write_letor<W: Write>(qs: &QuerySet, mut out: W) -> Result<()> {
    for q in &qs.queries {
        for d in &q.documents {
            write!(out, "{} qid:{}", d.label, q.qid)?;
            for (j, v) in d.features.iter().enumerate() {
                write!(out, " {}:{}", j + 1, v)?;
            }
            if let Some(id) = &d.doc_id {
                write!(out, " # {id}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn to_letor_string(qs: &QuerySet) -> String {
    let mut buf = Vec::new();
    write_letor(qs, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf8")
}

/// Candidate lists: one line per query, `qid<TAB>idx,idx,...` with 0-based
/// document positions.
pub fn parse_candidates<R: BufRead>(reader: R) -> Result<HashMap<String, Vec<usize>>> {
    let mut out = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (qid, list) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "expected qid<TAB>indices".into(),
        })?;
        let indices = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad document index {s:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(qid.trim().to_string(), indices);
    }
    Ok(out)
}

/// Keeps at most `k` documents per query, in candidate order. Queries
/// without a candidate list are kept whole.
pub fn restrict_topk(
    qs: &QuerySet,
    candidates: &HashMap<String, Vec<usize>>,
    k: usize,
) -> Result<QuerySet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut queries = Vec::with_capacity(qs.queries.len());
    for q in &qs.queries {
        let Some(list) = candidates.get(&q.qid) else {
            queries.push(q.clone());
            continue;
        };
        if let Some(&bad) = list.iter().find(|&&i| i >= q.documents.len()) {
            return Err(Error::IndexOutOfRange {
                qid: q.qid.clone(),
                index: bad,
                len: q.documents.len(),
            });
        }
        let documents: Vec<Document> = list
            .iter()
            .take(k)
            .map(|&i| q.documents[i].clone())
            .collect();
        if documents.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty candidate list for query {}",
                q.qid
            )));
        }
        queries.push(Query {
            qid: q.qid.clone(),
            documents,
        });
    }
    QuerySet::new(queries, qs.feature_count)
}

/// Role of a synthetic feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role", content = "parent")]
pub enum FeatureRole {
    Informative,
    /// Monotone rescaling of the informative feature at this index.
    DuplicateOf(usize),
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub informative: usize,
    pub duplicates_per_informative: usize,
    pub noise: usize,
}

impl SyntheticConfig {
    pub fn feature_count(&self) -> usize {
        self.informative * (1 + self.duplicates_per_informative) + self.noise
    }
}

/// Label noise amplitude; grades move only for documents this close to a
/// threshold.
const LABEL_NOISE: f64 = 0.05;

/// Builds a dataset whose feature roles are known.
///
/// Each informative feature is drawn uniformly from `[-1, 1]` and the grade
/// of a document counts the informative features that exceed zero after a
/// bounded perturbation, so grades lie in `0..=informative` and are monotone
/// in every informative feature. Duplicates are positive affine rescalings
/// of their parent; noise features are independent of the label. Columns
/// are placed in a seeded random order.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(QuerySet, Vec<FeatureRole>)> {
    if cfg.n_queries == 0 || cfg.docs_per_query == 0 || cfg.informative == 0 {
        return Err(Error::InvalidArgument(
            "n_queries, docs_per_query and informative must be positive".into(),
        ));
    }
    let d = cfg.feature_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // logical layout: informative, then duplicates grouped by parent, then noise
    let mut logical_roles = Vec::with_capacity(d);
    logical_roles.extend((0..cfg.informative).map(|_| FeatureRole::Informative));
    for p in 0..cfg.informative {
        for _ in 0..cfg.duplicates_per_informative {
            logical_roles.push(FeatureRole::DuplicateOf(p));
        }
    }
    logical_roles.extend((0..cfg.noise).map(|_| FeatureRole::Noise));

    let rescale: Vec<(f64, f64)> = (0..d)
        .map(|_| (rng.random_range(0.5..3.0), rng.random_range(-2.0..2.0)))
        .collect();
    let mut position: Vec<usize> = (0..d).collect();
    position.shuffle(&mut rng);

    let roles: Vec<FeatureRole> = {
        let mut roles = vec![FeatureRole::Noise; d];
        for (logical, role) in logical_roles.iter().enumerate() {
            roles[position[logical]] = match *role {
                FeatureRole::DuplicateOf(p) => FeatureRole::DuplicateOf(position[p]),
                r => r,
            };
        }
        roles
    };

    let mut queries = Vec::with_capacity(cfg.n_queries);
    for qi in 0..cfg.n_queries {
        let mut documents = Vec::with_capacity(cfg.docs_per_query);
        for _ in 0..cfg.docs_per_query {
            let informative: Vec<f64> = (0..cfg.informative)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let label = informative
                .iter()
                .filter(|&&x| x + rng.random_range(-LABEL_NOISE..LABEL_NOISE) > 0.0)
                .count() as u32;
            let mut features = vec![0.0; d];
            for (logical, role) in logical_roles.iter().enumerate() {
                let value = match *role {
                    FeatureRole::Informative => informative[logical],
                    FeatureRole::DuplicateOf(p) => {
                        let (a, b) = rescale[logical];
                        a * informative[p] + b
                    }
                    FeatureRole::Noise => rng.random_range(-1.0..1.0),
                };
                features[position[logical]] = value;
            }
            documents.push(Document {
                features,
                label: label.min(MAX_LABEL),
                doc_id: None,
            });
        }
        queries.push(Query {
            qid: (qi + 1).to_string(),
            documents,
        });
    }
    Ok((QuerySet::new(queries, d)?, roles))
}

/// Ground truth as written by the `synth` command: one line per feature,
/// `fid<TAB>role[<TAB>parent fid]`, ids 1-based.
pub fn write_roles<W: Write>(roles: &[FeatureRole], mut out: W) -> Result<()> {
    for (j, role) in roles.iter().enumerate() {
        match role {
            FeatureRole::Informative => writeln!(out, "{}\tinformative", j + 1)?,
            FeatureRole::DuplicateOf(p) => writeln!(out, "{}\tduplicate\t{}", j + 1, p + 1)?,
            FeatureRole::Noise => writeln!(out, "{}\tnoise", j + 1)?,
        }
    }
    Ok(())
}

/// Informative parent of `feature`'s duplicate family, if it has one.
pub fn family_of(roles: &[FeatureRole], feature: usize) -> Option<usize> {
    match roles[feature] {
        FeatureRole::Informative => Some(feature),
        FeatureRole::DuplicateOf(p) => Some(p),
        FeatureRole::Noise => None,
    }
}
