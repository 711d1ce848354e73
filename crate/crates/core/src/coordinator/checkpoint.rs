//! Checkpoints: one `.ffwt` file per network or optimiser plus a JSON manifest.
//!
//! ```text
//! <run_dir>/epoch_<e>/manifest.json
//! <run_dir>/epoch_<e>/agent_<i>/{policy,q1,q2,target_q1,target_q2,...}.ffwt
//! ```
//! The manifest is written last, so a directory without one is incomplete.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wire::{deserialize_bundle, serialize_bundle};
use super::Federation;
use crate::error::{FedError, Result};
use crate::nets::TensorBundle;
use crate::sac::{QNet, SacAgent};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentManifest {
    pub agent_id: usize,
    pub env_steps: u64,
    pub epochs_done: u64,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub strategy: String,
    pub epoch: u64,
    pub agents: Vec<AgentManifest>,
}

pub fn epoch_dir(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join(format!("epoch_{epoch}"))
}

fn qnet_bundle(q: &QNet) -> Result<TensorBundle> {
    let mut b = q.params().clone();
    for ext in q.externals() {
        b.merge_prefixed(&format!("ext.{}.", ext.agent_id), &ext.params)?;
    }
    Ok(b)
}

fn restore_qnet(q: &mut QNet, b: &TensorBundle) -> Result<()> {
    let mut own = b.clone();
    own.remove_prefix("ext.");
    q.params().check_compatible(&own)?;
    *q.params_mut() = own;
    for ext in q.externals_mut() {
        let saved = b.extract_prefix(&format!("ext.{}.", ext.agent_id));
        ext.params.check_compatible(&saved)?;
        ext.params = saved;
    }
    Ok(())
}

fn agent_components(agent: &SacAgent) -> Result<Vec<(&'static str, TensorBundle)>> {
    let st = &agent.state;
    let mut out = vec![
        ("policy", st.policy.params.clone()),
        ("q1", qnet_bundle(&st.q1)?),
        ("q2", qnet_bundle(&st.q2)?),
        ("target_q1", qnet_bundle(&st.target_q1)?),
        ("target_q2", qnet_bundle(&st.target_q2)?),
        ("log_alpha", st.log_alpha.clone()),
        ("optim_policy", st.policy_opt.to_bundle()),
        ("optim_q1", st.q1_opt.to_bundle()),
        ("optim_q2", st.q2_opt.to_bundle()),
        ("optim_alpha", st.alpha_opt.to_bundle()),
        ("replay", agent.buffer.to_bundle()),
    ];
    if let Some(e) = st.q1.local_encoder() {
        out.push(("encoder_q1", e));
    }
    if let Some(e) = st.q2.local_encoder() {
        out.push(("encoder_q2", e));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FedError::checkpoint(path, e))
}

/// Persist every agent's full training state for the federation's current epoch.
pub fn save_checkpoint(run_dir: &Path, fed: &Federation, run_id: &str, seed: u64, config_hash: &str) -> Result<PathBuf> {
    let epoch = fed.epoch();
    let dir = epoch_dir(run_dir, epoch);
    let mut agents = Vec::new();
    for agent in &fed.agents {
        let adir = dir.join(format!("agent_{}", agent.agent_id));
        fs::create_dir_all(&adir).map_err(|e| FedError::checkpoint(&adir, e))?;
        let mut files = Vec::new();
        for (name, bundle) in agent_components(agent)? {
            let file = format!("{name}.ffwt");
            write_file(&adir.join(&file), &serialize_bundle(&bundle))?;
            files.push(format!("agent_{}/{file}", agent.agent_id));
        }
        agents.push(AgentManifest {
            agent_id: agent.agent_id,
            env_steps: agent.env_steps,
            epochs_done: agent.epochs_done,
            files,
        });
    }
    let manifest = Manifest {
        run_id: run_id.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        strategy: fed.strategy.name().to_string(),
        epoch,
        agents,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| FedError::checkpoint(&dir, e))?;
    write_file(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(dir)
}

pub fn read_manifest(run_dir: &Path, epoch: u64) -> Result<Manifest> {
    let path = epoch_dir(run_dir, epoch).join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| FedError::checkpoint(&path, e))?;
    serde_json::from_str(&text).map_err(|e| FedError::checkpoint(&path, e))
}

fn read_bundle(path: &Path) -> Result<TensorBundle> {
    let bytes = fs::read(path).map_err(|e| FedError::checkpoint(path, e))?;
    deserialize_bundle(&bytes).map_err(|e| FedError::checkpoint(path, e))
}

/// Restore `fed` (built from the same configuration) to the saved state.
pub fn load_checkpoint(run_dir: &Path, epoch: u64, fed: &mut Federation) -> Result<Manifest> {
    let manifest = read_manifest(run_dir, epoch)?;
    let dir = epoch_dir(run_dir, epoch);
    if manifest.strategy != fed.strategy.name() || manifest.agents.len() != fed.agents.len() {
        return Err(FedError::checkpoint(&dir, "checkpoint does not match this configuration"));
    }
    for (agent, saved) in fed.agents.iter_mut().zip(&manifest.agents) {
        if agent.agent_id != saved.agent_id {
            return Err(FedError::checkpoint(&dir, format!("unexpected agent {}", saved.agent_id)));
        }
        let adir = dir.join(format!("agent_{}", agent.agent_id));
        let load = |name: &str| read_bundle(&adir.join(format!("{name}.ffwt")));
        let wrap = |name: &str, e: FedError| FedError::checkpoint(adir.join(format!("{name}.ffwt")), e);
        let st = &mut agent.state;

        let policy = load("policy")?;
        st.policy.params.check_compatible(&policy).map_err(|e| wrap("policy", e))?;
        st.policy.params = policy;
        for (name, q) in [
            ("q1", &mut st.q1),
            ("q2", &mut st.q2),
            ("target_q1", &mut st.target_q1),
            ("target_q2", &mut st.target_q2),
        ] {
            restore_qnet(q, &load(name)?).map_err(|e| wrap(name, e))?;
        }
        let log_alpha = load("log_alpha")?;
        st.log_alpha.check_compatible(&log_alpha).map_err(|e| wrap("log_alpha", e))?;
        st.log_alpha = log_alpha;
        st.policy_opt.load_bundle(&load("optim_policy")?).map_err(|e| wrap("optim_policy", e))?;
        st.q1_opt.load_bundle(&load("optim_q1")?).map_err(|e| wrap("optim_q1", e))?;
        st.q2_opt.load_bundle(&load("optim_q2")?).map_err(|e| wrap("optim_q2", e))?;
        st.alpha_opt.load_bundle(&load("optim_alpha")?).map_err(|e| wrap("optim_alpha", e))?;
        agent.buffer.load_bundle(&load("replay")?).map_err(|e| wrap("replay", e))?;
        agent.env_steps = saved.env_steps;
        agent.epochs_done = saved.epochs_done;
    }
    Ok(manifest)
}

/// Every agent's saved first-critic encoder, keyed by agent id. Only the
/// `encoder_*.ffwt` files are read.
pub fn load_encoders(run_dir: &Path, epoch: u64) -> Result<BTreeMap<usize, TensorBundle>> {
    let manifest = read_manifest(run_dir, epoch)?;
    let dir = epoch_dir(run_dir, epoch);
    let mut out = BTreeMap::new();
    for a in &manifest.agents {
        let file = format!("agent_{}/encoder_q1.ffwt", a.agent_id);
        if !a.files.contains(&file) {
            return Err(FedError::checkpoint(dir.join(&file), "run saved no encoder for this agent"));
        }
        out.insert(a.agent_id, read_bundle(&dir.join(file))?);
    }
    Ok(out)
}

/// Highest epoch with a complete checkpoint under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<u64> {
    fs::read_dir(run_dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch: u64 = name.strip_prefix("epoch_")?.parse().ok()?;
            e.path().join(MANIFEST).is_file().then_some(epoch)
        })
        .max()
}

