use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;

use radiosynth_core::metrics::roc_csv;
use radiosynth_core::study::{session_roc, vertical_average_roc, SessionReport, SessionStore, StudySession};
use radiosynth_server::ServerConfig;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::io::{mkdir, write_text};
use crate::record::{list_files, require_dir, DirLock, InputSet, RunRecord};

/// False-positive-rate grid for group ROC averages.
pub const FPR_GRID_STEPS: usize = 100;

pub fn server_config(
    cfg: &PipelineConfig,
    real: &Path,
    fake: &Path,
    sessions: &Path,
    static_dir: Option<&Path>,
) -> CliResult<ServerConfig> {
    require_dir(real, "real images")?;
    require_dir(fake, "synthetic images")?;
    if let Some(d) = static_dir {
        require_dir(d, "static bundle")?;
    }
    let mut sc = ServerConfig::new(real, fake, sessions);
    sc.addr = SocketAddr::from(([127, 0, 0, 1], cfg.port));
    sc.static_dir = static_dir.map(Path::to_path_buf);
    sc.n_each = cfg.n_each;
    sc.deadline_secs = cfg.deadline_secs;
    Ok(sc)
}

/// Runs the study service until interrupted.
pub fn cmd_study_serve(cfg: &PipelineConfig, sc: ServerConfig) -> CliResult<()> {
    let _ = cfg;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Data(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        tokio::select! {
            r = radiosynth_server::serve(sc) => r.map_err(CliError::from),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}

/// `observer,group` rows; observers without a row fall in group `all`.
fn read_groups(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("observer")) {
            continue;
        }
        let (o, g) = line
            .split_once(',')
            .ok_or_else(|| CliError::Config(format!("{} line {}: expected `observer,group`", path.display(), n + 1)))?;
        out.insert(o.trim().to_string(), g.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ScoredSession {
    pub id: String,
    pub observer: String,
    pub group: String,
    pub report: SessionReport,
    pub auc: f64,
}

/// Scores every complete stored session. Writes `reports/{id}.json`,
/// `transcripts/{id}.csv`, `summary.csv` and one `roc_{group}.csv`
/// vertical average per group. Incomplete sessions are left out.
pub fn cmd_study_score(cfg: &PipelineConfig, sessions: &Path, output: &Path, groups: Option<&Path>) -> CliResult<Vec<ScoredSession>> {
    require_dir(sessions, "sessions")?;
    let groups = match groups {
        Some(p) => read_groups(p)?,
        None => HashMap::new(),
    };
    let store = SessionStore::open(sessions)?;
    let all = store.load_all()?;
    let complete: Vec<StudySession> = all.into_iter().filter(|s| s.is_complete()).collect();
    if complete.is_empty() {
        return Err(CliError::Data(format!("no complete sessions in {}", sessions.display())));
    }
    let _lock = DirLock::acquire(output)?;
    let (rep_dir, tr_dir) = (output.join("reports"), output.join("transcripts"));
    mkdir(&rep_dir)?;
    mkdir(&tr_dir)?;

    let mut scored = Vec::with_capacity(complete.len());
    let mut by_group: BTreeMap<String, Vec<StudySession>> = BTreeMap::new();
    let mut summary = String::from("session,observer,group,tp,tn,fp,fn,u,precision,recall,accuracy,auc,timed_out\n");
    for s in complete {
        let report = s.score()?;
        let auc = session_roc(&s)?.auc;
        let group = groups.get(&s.observer).cloned().unwrap_or_else(|| "all".into());
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
        write_text(&rep_dir.join(format!("{}.json", s.id)), &json)?;
        write_text(&tr_dir.join(format!("{}.csv", s.id)), &s.transcript_csv())?;
        let r = &report;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
            s.id, s.observer, group, r.tp, r.tn, r.fp, r.fn_, r.u, r.precision, r.recall, r.accuracy, auc, r.timed_out
        ));
        scored.push(ScoredSession { id: s.id.clone(), observer: s.observer.clone(), group: group.clone(), report, auc });
        by_group.entry(group).or_default().push(s);
    }
    write_text(&output.join("summary.csv"), &summary)?;

    let grid: Vec<f64> = (0..=FPR_GRID_STEPS).map(|k| k as f64 / FPR_GRID_STEPS as f64).collect();
    for (group, members) in &by_group {
        let tpr = vertical_average_roc(members, &grid)?;
        let mut csv = String::from("fpr,tpr\n");
        for (f, t) in grid.iter().zip(&tpr) {
            csv.push_str(&format!("{f},{t}\n"));
        }
        write_text(&output.join(format!("roc_{group}.csv")), &csv)?;
        if members.len() == 1 {
            write_text(&output.join(format!("roc_{group}_steps.csv")), &roc_csv(&session_roc(&members[0])?))?;
        }
    }
    let mut rec = RunRecord::new("study-score", cfg, InputSet::hash(&list_files(sessions, &["json"])?)?);
    rec.extra = serde_json::json!({ "sessions": scored.len(), "groups": by_group.keys().collect::<Vec<_>>() });
    rec.write(output)?;
    Ok(scored)
}
