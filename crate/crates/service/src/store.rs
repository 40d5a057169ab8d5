//! Single-file SQLite case store (WAL journal). Images are content-addressed by
//! SHA-256; rendered overlays are cached per (case, class, alpha, model version).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS images (
    sha256 TEXT PRIMARY KEY,
    content_type TEXT NOT NULL,
    bytes BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS cases (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    case_id TEXT NOT NULL UNIQUE,
    image_sha256 TEXT NOT NULL REFERENCES images(sha256),
    filename TEXT,
    modality TEXT NOT NULL,
    probabilities TEXT NOT NULL,
    predicted_label TEXT NOT NULL,
    model_version TEXT NOT NULL,
    triage TEXT NOT NULL,
    reviewer TEXT,
    note TEXT,
    revision INTEGER NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    triaged_at TEXT
);
CREATE INDEX IF NOT EXISTS cases_by_triage ON cases(triage, seq);
CREATE TABLE IF NOT EXISTS triage_events (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    case_id TEXT NOT NULL REFERENCES cases(case_id),
    decision TEXT NOT NULL,
    reviewer TEXT,
    note TEXT,
    revision INTEGER NOT NULL,
    at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS overlays (
    case_id TEXT NOT NULL,
    class INTEGER NOT NULL,
    alpha TEXT NOT NULL,
    model_version TEXT NOT NULL,
    png BLOB NOT NULL,
    PRIMARY KEY (case_id, class, alpha, model_version)
);
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Triage {
    Unreviewed,
    ConfirmPositive,
    ConfirmNegative,
    NeedsReview,
}

impl Triage {
    pub const ALL: [Triage; 4] = [Triage::Unreviewed, Triage::ConfirmPositive, Triage::ConfirmNegative, Triage::NeedsReview];

    pub fn as_str(self) -> &'static str {
        match self {
            Triage::Unreviewed => "UNREVIEWED",
            Triage::ConfirmPositive => "CONFIRM_POSITIVE",
            Triage::ConfirmNegative => "CONFIRM_NEGATIVE",
            Triage::NeedsReview => "NEEDS_REVIEW",
        }
    }
}

impl std::str::FromStr for Triage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Triage::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown triage state {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageEvent {
    pub decision: Triage,
    pub reviewer: Option<String>,
    pub note: Option<String>,
    pub revision: u64,
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub modality: String,
    pub image_sha256: String,
    pub filename: Option<String>,
    /// Class name to probability.
    pub probabilities: BTreeMap<String, f64>,
    pub predicted_label: String,
    pub model_version: String,
    pub triage: Triage,
    pub reviewer: Option<String>,
    pub note: Option<String>,
    /// Bumped on every triage write; clients send it back to detect stale edits.
    pub revision: u64,
    pub created_at: String,
    pub updated_at: String,
    pub triaged_at: Option<String>,
    #[serde(default)]
    pub history: Vec<TriageEvent>,
}

/// Fields fixed at prediction time.
#[derive(Debug, Clone)]
pub struct NewCase {
    pub case_id: String,
    pub modality: String,
    pub image_sha256: String,
    pub filename: Option<String>,
    pub probabilities: BTreeMap<String, f64>,
    pub predicted_label: String,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OverlayKey {
    pub case_id: String,
    pub class: usize,
    pub alpha: String,
    pub model_version: String,
}

#[derive(Debug)]
pub enum TriageOutcome {
    Updated(Case),
    NotFound,
    /// `expected_revision` was stale; carries the current case.
    Conflict(Case),
}

pub struct Store {
    conn: Mutex<Connection>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

const CASE_COLUMNS: &str = "case_id, modality, image_sha256, filename, probabilities, predicted_label, model_version, \
     triage, reviewer, note, revision, created_at, updated_at, triaged_at";

fn row_to_case(row: &rusqlite::Row<'_>) -> rusqlite::Result<Case> {
    let probs: String = row.get(4)?;
    let triage: String = row.get(7)?;
    let bad = |i: usize, e: String| rusqlite::Error::FromSqlConversionFailure(i, rusqlite::types::Type::Text, e.into());
    Ok(Case {
        case_id: row.get(0)?,
        modality: row.get(1)?,
        image_sha256: row.get(2)?,
        filename: row.get(3)?,
        probabilities: serde_json::from_str(&probs).map_err(|e| bad(4, e.to_string()))?,
        predicted_label: row.get(5)?,
        model_version: row.get(6)?,
        triage: triage.parse().map_err(|e| bad(7, e))?,
        reviewer: row.get(8)?,
        note: row.get(9)?,
        revision: row.get::<_, i64>(10)? as u64,
        created_at: row.get(11)?,
        updated_at: row.get(12)?,
        triaged_at: row.get(13)?,
        history: Vec::new(),
    })
}

impl Store {
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Stores image bytes once per content hash.
    pub fn put_image(&self, sha256: &str, content_type: &str, bytes: &[u8]) -> Result<(), ServiceError> {
        self.conn().execute(
            "INSERT OR IGNORE INTO images (sha256, content_type, bytes) VALUES (?1, ?2, ?3)",
            params![sha256, content_type, bytes],
        )?;
        Ok(())
    }

    pub fn get_image(&self, sha256: &str) -> Result<Option<(String, Vec<u8>)>, ServiceError> {
        Ok(self
            .conn()
            .query_row("SELECT content_type, bytes FROM images WHERE sha256 = ?1", [sha256], |r| {
                Ok((r.get(0)?, r.get(1)?))
            })
            .optional()?)
    }

    pub fn image_count(&self) -> Result<u64, ServiceError> {
        Ok(self.conn().query_row("SELECT COUNT(*) FROM images", [], |r| r.get::<_, i64>(0))? as u64)
    }

    pub fn insert_case(&self, new: &NewCase) -> Result<Case, ServiceError> {
        let at = now();
        let probs = serde_json::to_string(&new.probabilities).map_err(|e| ServiceError::Config(e.to_string()))?;
        self.conn().execute(
            "INSERT INTO cases (case_id, image_sha256, filename, modality, probabilities, predicted_label, \
             model_version, triage, revision, created_at, updated_at) \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, 0, ?9, ?9)",
            params![
                new.case_id,
                new.image_sha256,
                new.filename,
                new.modality,
                probs,
                new.predicted_label,
                new.model_version,
                Triage::Unreviewed.as_str(),
                at
            ],
        )?;
        self.get_case(&new.case_id)?.ok_or_else(|| ServiceError::Config("case vanished after insert".into()))
    }

    fn history(conn: &Connection, case_id: &str) -> rusqlite::Result<Vec<TriageEvent>> {
        let mut stmt =
            conn.prepare("SELECT decision, reviewer, note, revision, at FROM triage_events WHERE case_id = ?1 ORDER BY id")?;
        let rows = stmt.query_map([case_id], |r| {
            let d: String = r.get(0)?;
            Ok(TriageEvent {
                decision: d.parse().unwrap_or(Triage::NeedsReview),
                reviewer: r.get(1)?,
                note: r.get(2)?,
                revision: r.get::<_, i64>(3)? as u64,
                at: r.get(4)?,
            })
        })?;
        rows.collect()
    }

    fn load_case(conn: &Connection, case_id: &str) -> rusqlite::Result<Option<Case>> {
        let sql = format!("SELECT {CASE_COLUMNS} FROM cases WHERE case_id = ?1");
        let case = conn.query_row(&sql, [case_id], row_to_case).optional()?;
        match case {
            Some(mut c) => {
                c.history = Self::history(conn, case_id)?;
                Ok(Some(c))
            }
            None => Ok(None),
        }
    }

    pub fn get_case(&self, case_id: &str) -> Result<Option<Case>, ServiceError> {
        Ok(Self::load_case(&self.conn(), case_id)?)
    }

    /// Newest first. Returns the page and the total number of matching cases.
    pub fn list_cases(
        &self,
        triage: Option<Triage>,
        modality: Option<&str>,
        limit: usize,
        offset: usize,
    ) -> Result<(Vec<Case>, u64), ServiceError> {
        let conn = self.conn();
        let filter = "WHERE (?1 IS NULL OR triage = ?1) AND (?2 IS NULL OR modality = ?2)";
        let t = triage.map(Triage::as_str);
        let total: i64 =
            conn.query_row(&format!("SELECT COUNT(*) FROM cases {filter}"), params![t, modality], |r| r.get(0))?;
        let sql = format!("SELECT {CASE_COLUMNS} FROM cases {filter} ORDER BY seq DESC LIMIT ?3 OFFSET ?4");
        let mut stmt = conn.prepare(&sql)?;
        let cases = stmt
            .query_map(params![t, modality, limit as i64, offset as i64], row_to_case)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok((cases, total as u64))
    }

    /// Records a review decision. With `expected_revision`, the write only happens
    /// if nobody else has triaged the case since the client last read it.
    pub fn triage(
        &self,
        case_id: &str,
        decision: Triage,
        reviewer: Option<&str>,
        note: Option<&str>,
        expected_revision: Option<u64>,
    ) -> Result<TriageOutcome, ServiceError> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let Some(current) = Self::load_case(&tx, case_id)? else {
            return Ok(TriageOutcome::NotFound);
        };
        if expected_revision.is_some_and(|r| r != current.revision) {
            return Ok(TriageOutcome::Conflict(current));
        }
        let at = now();
        let revision = current.revision + 1;
        tx.execute(
            "UPDATE cases SET triage = ?2, reviewer = ?3, note = ?4, revision = ?5, updated_at = ?6, triaged_at = ?6 \
             WHERE case_id = ?1",
            params![case_id, decision.as_str(), reviewer, note, revision as i64, at],
        )?;
        tx.execute(
            "INSERT INTO triage_events (case_id, decision, reviewer, note, revision, at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![case_id, decision.as_str(), reviewer, note, revision as i64, at],
        )?;
        let updated = Self::load_case(&tx, case_id)?.expect("row exists inside the transaction");
        tx.commit()?;
        Ok(TriageOutcome::Updated(updated))
    }

    pub fn get_overlay(&self, key: &OverlayKey) -> Result<Option<Vec<u8>>, ServiceError> {
        Ok(self
            .conn()
            .query_row(
                "SELECT png FROM overlays WHERE case_id = ?1 AND class = ?2 AND alpha = ?3 AND model_version = ?4",
                params![key.case_id, key.class as i64, key.alpha, key.model_version],
                |r| r.get(0),
            )
            .optional()?)
    }

    pub fn put_overlay(&self, key: &OverlayKey, png: &[u8]) -> Result<(), ServiceError> {
        self.conn().execute(
            "INSERT OR IGNORE INTO overlays (case_id, class, alpha, model_version, png) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![key.case_id, key.class as i64, key.alpha, key.model_version, png],
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn new_case(id: &str, modality: &str) -> NewCase {
        NewCase {
            case_id: id.into(),
            modality: modality.into(),
            image_sha256: "abc".into(),
            filename: Some("a.png".into()),
            probabilities: BTreeMap::from([("covid19".to_string(), 0.25)]),
            predicted_label: "non_covid19".into(),
            model_version: "cxr-1".into(),
        }
    }

    #[test]
    fn triage_revision_and_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("s.db")).unwrap();
        store.put_image("abc", "image/png", b"x").unwrap();
        store.put_image("abc", "image/png", b"x").unwrap();
        assert_eq!(store.image_count().unwrap(), 1);
        let c = store.insert_case(&new_case("c1", "cxr")).unwrap();
        assert_eq!((c.triage, c.revision), (Triage::Unreviewed, 0));

        let TriageOutcome::Updated(u) = store.triage("c1", Triage::NeedsReview, Some("dr a"), Some("hazy"), Some(0)).unwrap()
        else {
            panic!()
        };
        assert_eq!((u.triage, u.revision, u.history.len()), (Triage::NeedsReview, 1, 1));
        assert!(matches!(
            store.triage("c1", Triage::ConfirmNegative, None, None, Some(0)).unwrap(),
            TriageOutcome::Conflict(ref cur) if cur.revision == 1
        ));
        assert!(matches!(store.triage("zz", Triage::NeedsReview, None, None, None).unwrap(), TriageOutcome::NotFound));
    }

    #[test]
    fn listing_is_newest_first_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("s.db")).unwrap();
        store.put_image("abc", "image/png", b"x").unwrap();
        for i in 0..5 {
            store.insert_case(&new_case(&format!("c{i}"), if i % 2 == 0 { "ct" } else { "cxr" })).unwrap();
        }
        store.triage("c1", Triage::NeedsReview, None, None, None).unwrap();
        let (page, total) = store.list_cases(None, None, 2, 1).unwrap();
        assert_eq!(total, 5);
        assert_eq!(page.iter().map(|c| c.case_id.as_str()).collect::<Vec<_>>(), ["c3", "c2"]);
        let (nr, n) = store.list_cases(Some(Triage::NeedsReview), None, 10, 0).unwrap();
        assert_eq!((n, nr[0].case_id.as_str()), (1, "c1"));
        assert_eq!(store.list_cases(None, Some("ct"), 10, 0).unwrap().1, 3);
    }

    #[test]
    fn triage_names_parse() {
        for t in Triage::ALL {
            assert_eq!(t.as_str().parse::<Triage>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.as_str()));
        }
        assert!("maybe".parse::<Triage>().is_err());
    }
}
