use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::PoeError;
use crate::dataset::Metadata;
use crate::numerics::NumericsError;

/// Row indices of users, POIs and the two metadata item spaces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoeVocab {
    pub users: Vec<String>,
    pub pois: Vec<String>,
    pub user_items: Vec<String>,
    pub poi_items: Vec<String>,
    /// Item rows of each user.
    pub user_meta: Vec<Vec<usize>>,
    /// Item rows of each POI.
    pub poi_meta: Vec<Vec<usize>>,
    user_of: HashMap<String, usize>,
    poi_of: HashMap<String, usize>,
}

fn index(ids: &[String]) -> HashMap<String, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

fn rows(
    ids: &[String],
    meta: &BTreeMap<String, BTreeSet<String>>,
    items: &HashMap<String, usize>,
) -> Result<Vec<Vec<usize>>, PoeError> {
    ids.iter()
        .map(|id| {
            meta.get(id)
                .into_iter()
                .flatten()
                .map(|it| items.get(it).copied().ok_or_else(|| PoeError::UnknownItem(it.clone())))
                .collect()
        })
        .collect()
}

impl PoeVocab {
    /// Entities in the given order; item spaces are the sorted items that
    /// occur in `meta` for those entities.
    pub fn build(users: Vec<String>, pois: Vec<String>, meta: &Metadata) -> Self {
        let collect = |ids: &[String], m: &BTreeMap<String, BTreeSet<String>>| -> Vec<String> {
            let set: BTreeSet<&String> = ids.iter().filter_map(|id| m.get(id)).flatten().collect();
            set.into_iter().cloned().collect()
        };
        let user_items = collect(&users, &meta.user_meta);
        let poi_items = collect(&pois, &meta.poi_meta);
        Self::from_parts(users, pois, user_items, poi_items, meta).expect("items collected from the same metadata")
    }

    fn from_parts(
        users: Vec<String>,
        pois: Vec<String>,
        user_items: Vec<String>,
        poi_items: Vec<String>,
        meta: &Metadata,
    ) -> Result<Self, PoeError> {
        let user_meta = rows(&users, &meta.user_meta, &index(&user_items))?;
        let poi_meta = rows(&pois, &meta.poi_meta, &index(&poi_items))?;
        Ok(Self {
            user_of: index(&users),
            poi_of: index(&pois),
            users,
            pois,
            user_items,
            poi_items,
            user_meta,
            poi_meta,
        })
    }

    pub fn user(&self, id: &str) -> Option<usize> {
        self.user_of.get(id).copied()
    }

    pub fn poi(&self, id: &str) -> Option<usize> {
        self.poi_of.get(id).copied()
    }

    pub(crate) fn write_meta(&self, out: &mut BTreeMap<String, String>) {
        out.insert("users".into(), self.users.join(","));
        out.insert("pois".into(), self.pois.join(","));
        out.insert("user_items".into(), self.user_items.join(","));
        out.insert("poi_items".into(), self.poi_items.join(","));
        let enc = |rows: &[Vec<usize>]| {
            rows.iter()
                .map(|r| r.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("."))
                .collect::<Vec<_>>()
                .join(",")
        };
        out.insert("user_meta".into(), enc(&self.user_meta));
        out.insert("poi_meta".into(), enc(&self.poi_meta));
    }

    pub(crate) fn read_meta(meta: &BTreeMap<String, String>) -> Result<Self, PoeError> {
        let missing = |k: &str| NumericsError::Checkpoint {
            line: 0,
            msg: format!("missing meta key {k}"),
        };
        let list = |k: &str| -> Result<Vec<String>, PoeError> {
            let s = meta.get(k).ok_or_else(|| missing(k))?;
            Ok(if s.is_empty() { Vec::new() } else { s.split(',').map(str::to_string).collect() })
        };
        let users = list("users")?;
        let pois = list("pois")?;
        let dec = |k: &str, n: usize| -> Result<Vec<Vec<usize>>, PoeError> {
            let s = meta.get(k).ok_or_else(|| missing(k))?;
            let parsed: Result<Vec<Vec<usize>>, _> = s
                .split(',')
                .take(n)
                .map(|r| if r.is_empty() { Ok(Vec::new()) } else { r.split('.').map(str::parse).collect() })
                .collect();
            let mut parsed = parsed.map_err(|_| NumericsError::Checkpoint {
                line: 0,
                msg: format!("bad meta value for {k}"),
            })?;
            parsed.resize(n, Vec::new());
            Ok(parsed)
        };
        Ok(Self {
            user_meta: dec("user_meta", users.len())?,
            poi_meta: dec("poi_meta", pois.len())?,
            user_items: list("user_items")?,
            poi_items: list("poi_items")?,
            user_of: index(&users),
            poi_of: index(&pois),
            users,
            pois,
        })
    }
}
