//! Exhaustive scoring and ranking of a database against composed queries.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;

use crate::alignment::FusionWeight;
use crate::error::{Error, Result};
use crate::features::{MultiLevelFeatures, TokenEmbeddings};
use crate::metrics::RelevanceVector;
use crate::model::{score_encodings, Encoding, Model, Scores};

#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseEntry {
    pub id: String,
    pub label: String,
    pub features: MultiLevelFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub label: String,
    pub image_features: MultiLevelFeatures,
    pub text: TokenEmbeddings,
}

/// Candidate images with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Database {
    entries: Vec<DatabaseEntry>,
}

impl Database {
    pub fn new(entries: Vec<DatabaseEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::config(format!("duplicate database id {:?}", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[DatabaseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatabaseEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn count_label(&self, label: &str) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub candidate_id: String,
    pub label: String,
    pub scores: Scores,
}

/// Candidates ordered by fused score, descending; ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

fn ranking_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.scores
        .score
        .total_cmp(&a.scores.score)
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

impl RankedList {
    /// Sort scored candidates into ranking order.
    pub fn from_scored(query_id: impl Into<String>, mut entries: Vec<RankedEntry>) -> Self {
        entries.sort_by(ranking_order);
        Self {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.candidate_id.as_str()).collect()
    }

    /// Label-level relevance of each rank; `num_relevant` is the query's R_q.
    pub fn relevance(&self, label: &str, num_relevant: usize) -> Result<RelevanceVector> {
        let rel = self.entries.iter().map(|e| e.label == label).collect();
        RelevanceVector::new(rel, num_relevant)
    }
}

/// Ids of database entries sharing the query's label.
pub fn label_positives(q: &QueryRecord, db: &Database) -> BTreeSet<String> {
    db.entries()
        .iter()
        .filter(|e| e.label == q.label)
        .map(|e| e.id.clone())
        .collect()
}

pub fn score(q: &QueryRecord, e: &DatabaseEntry, model: &Model, w: FusionWeight) -> Result<Scores> {
    let qe = model.encode_query(&q.image_features, &q.text)?;
    let te = model.encode_target(&e.features)?;
    score_encodings(&qe, &te, w)
}

/// A database with every candidate already encoded under one model state.
#[derive(Debug, Clone)]
pub struct EncodedDatabase<'a> {
    db: &'a Database,
    encodings: Vec<Encoding>,
}

impl<'a> EncodedDatabase<'a> {
    pub fn build(model: &Model, db: &'a Database) -> Result<Self> {
        let encodings = db
            .entries()
            .par_iter()
            .map(|e| model.encode_target(&e.features))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { db, encodings })
    }

    pub fn database(&self) -> &Database {
        self.db
    }

    pub fn rank(
        &self,
        query_id: &str,
        query: &Encoding,
        w: FusionWeight,
        exclude_self: bool,
    ) -> Result<RankedList> {
        if self.db.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let scored = self
            .db
            .entries()
            .iter()
            .zip(&self.encodings)
            .filter(|(e, _)| !(exclude_self && e.id == query_id))
            .map(|(e, enc)| {
                Ok(RankedEntry {
                    candidate_id: e.id.clone(),
                    label: e.label.clone(),
                    scores: score_encodings(query, enc, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RankedList::from_scored(query_id, scored))
    }
}

/// Score every candidate against `q` (composed once) and sort.
pub fn rank(
    q: &QueryRecord,
    db: &Database,
    model: &Model,
    w: FusionWeight,
    exclude_self: bool,
) -> Result<RankedList> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let query = model.encode_query(&q.image_features, &q.text)?;
    EncodedDatabase::build(model, db)?.rank(&q.id, &query, w, exclude_self)
}

/// Rank many queries against one database, encoding candidates once.
pub fn rank_all(
    queries: &[&QueryRecord],
    db: &Database,
    model: &Model,
    w: FusionWeight,
    exclude_self: bool,
) -> Result<Vec<RankedList>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let encoded = EncodedDatabase::build(model, db)?;
    queries
        .par_iter()
        .map(|q| {
            let enc = model.encode_query(&q.image_features, &q.text)?;
            encoded.rank(&q.id, &enc, w, exclude_self)
        })
        .collect()
}

pub fn top_k(r: &RankedList, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::arg("top-K cutoff must be at least 1"));
    }
    Ok(RankedList {
        query_id: r.query_id.clone(),
        entries: r.entries.iter().take(k).cloned().collect(),
    })
}
