//! Websocket session server behind the demonstration UI.
//!
//! Every message is a JSON object `{"type": ..., "payload": ...}`.
//!
//! Client to server:
//! * `action` `{"action": [dx, dy]}`: one environment step; clamped to the action box.
//! * `reset` `{"seed": u64?}`: new episode.
//! * `label_request` `{"file": str?, "negatives": bool}`: export every recorded
//!   successful trajectory as a JSONL demonstration file.
//!
//! Server to client: `state` after connect and after every action or reset,
//! `export` after a label request, `error` on any rejected message.

use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{bail, Context, Result};
use ceres_core::demo::{
    negatives_by_reversal, negatives_by_sampling, positives_of, save_demos, DemoSource, DemoStep, DemoTrajectory,
};
use ceres_core::env::{ControlMode, ObservationMode, ObstacleMode, Rect, StepInfo};
use ceres_core::geometry::feasible_polygon;
use ceres_core::{ConstraintNet, DemoSet, Env, EnvConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tungstenite::{accept, Message};

use crate::args::ServeArgs;

/// Probe directions per state when exporting sampled negatives.
const EXPORT_PROBES: usize = 16;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub env: EnvConfig,
    pub constraints: Option<ConstraintNet>,
    pub export_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
struct Envelope {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    payload: Value,
}

#[derive(Debug, Deserialize)]
struct ActionPayload {
    action: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct ResetPayload {
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
struct LabelPayload {
    file: Option<String>,
    #[serde(default)]
    negatives: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Flags {
    pub success: bool,
    pub failure: bool,
    pub truncated: bool,
    pub done: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StateMessage {
    pub agent: [f64; 2],
    pub target: [f64; 2],
    pub obstacles: Vec<Rect>,
    pub beams: Vec<f64>,
    /// Feasible action polygon (offsets from the agent), or the action box
    /// when no constraint network is loaded.
    pub constraint_polytope_vertices: Vec<[f64; 2]>,
    pub constraint_count: usize,
    pub action_radius: f64,
    pub reward: f64,
    pub flags: Flags,
    pub timestep: usize,
    pub recorded_trajectories: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportMessage {
    pub path: String,
    pub positives: usize,
    pub negatives: usize,
    pub n_obs: usize,
    pub n_act: usize,
}

/// One connected client: its environment, the episode in progress and the
/// successful trajectories recorded so far.
pub struct Session<'a> {
    opts: &'a ServeOptions,
    env: Env,
    current: Vec<DemoStep>,
    recorded: Vec<DemoTrajectory>,
    last_reward: f64,
    last_info: StepInfo,
    next_id: u64,
}

fn sanitize(file: &str) -> Result<String> {
    let name = Path::new(file)
        .file_name()
        .and_then(|n| n.to_str())
        .filter(|n| !n.is_empty() && *n != "..")
        .context("invalid export file name")?;
    Ok(name.to_string())
}

impl<'a> Session<'a> {
    pub fn new(opts: &'a ServeOptions, seed: u64) -> Result<Self> {
        let mut env = Env::new(opts.env.clone(), seed)?;
        env.reset()?;
        Ok(Self {
            opts,
            env,
            current: Vec::new(),
            recorded: Vec::new(),
            last_reward: 0.0,
            last_info: StepInfo::default(),
            next_id: 0,
        })
    }

    pub fn recorded(&self) -> &[DemoTrajectory] {
        &self.recorded
    }

    pub fn state(&self) -> StateMessage {
        let cfg = self.env.config();
        let bounds = cfg.action_box();
        let (vertices, count) = match &self.opts.constraints {
            Some(net) => {
                let set = net.predict(&self.env.full_observation());
                (feasible_polygon(&set, &bounds), set.n_constraints())
            }
            None => {
                let (lo, hi) = (bounds.lower(), bounds.upper());
                (vec![[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]], 0)
            }
        };
        let s = self.env.state();
        StateMessage {
            agent: s.agent,
            target: s.target,
            obstacles: s.holes.clone(),
            beams: self.env.beam_distances(),
            constraint_polytope_vertices: vertices,
            constraint_count: count,
            action_radius: match cfg.control {
                ControlMode::Position => cfg.max_step,
                ControlMode::Force => cfg.force.max_force,
            },
            reward: self.last_reward,
            flags: Flags {
                success: self.last_info.success,
                failure: self.last_info.failure,
                truncated: self.last_info.truncated,
                done: s.done,
            },
            timestep: s.timestep,
            recorded_trajectories: self.recorded.len(),
        }
    }

    pub fn reset(&mut self, seed: Option<u64>) -> Result<StateMessage> {
        match seed {
            Some(s) => self.env.reset_with_seed(s)?,
            None => self.env.reset()?,
        };
        self.current.clear();
        self.last_reward = 0.0;
        self.last_info = StepInfo::default();
        Ok(self.state())
    }

    pub fn act(&mut self, action: &[f64]) -> Result<StateMessage> {
        if self.env.is_done() {
            bail!("episode is over; send reset");
        }
        if action.len() != 2 || action.iter().any(|a| !a.is_finite()) {
            bail!("action must be two finite numbers");
        }
        let action = self.env.config().action_box().clamp(action);
        let snapshot = self.env.snapshot();
        let state = self.env.full_observation();
        let result = self.env.step(&action)?;
        self.current.push(DemoStep {
            state,
            action,
            next_state: self.env.full_observation(),
            snapshot,
        });
        self.last_reward = result.reward;
        self.last_info = result.info;
        if result.end {
            let steps = std::mem::take(&mut self.current);
            if result.info.success {
                self.recorded.push(DemoTrajectory { id: self.next_id, steps });
                self.next_id += 1;
            }
        }
        Ok(self.state())
    }

    pub fn export(&mut self, file: Option<&str>, negatives: bool) -> Result<ExportMessage> {
        let cfg = self.env.config().clone();
        let name = sanitize(file.unwrap_or("human_demos.jsonl"))?;
        let mut records = positives_of(&self.recorded, DemoSource::Human);
        if negatives {
            if cfg.control != ControlMode::Position || cfg.obstacles != ObstacleMode::StaticMaze {
                bail!("negative generation needs position control in the static maze");
            }
            records.extend(negatives_by_sampling(&self.recorded, &mut self.env, EXPORT_PROBES, DemoSource::Human)?);
            records.extend(negatives_by_reversal(&self.recorded, DemoSource::Human));
        }
        let set = DemoSet::new(&cfg.hash(), cfg.n_obs(ObservationMode::Full), cfg.n_act(), records);
        std::fs::create_dir_all(&self.opts.export_dir)?;
        let path = self.opts.export_dir.join(name);
        let counts = save_demos(&set, &path)?;
        Ok(ExportMessage {
            path: path.display().to_string(),
            positives: counts.positives,
            negatives: counts.negatives,
            n_obs: set.header.n_obs,
            n_act: set.header.n_act,
        })
    }

    /// Handles one client text message and returns the reply.
    pub fn handle(&mut self, text: &str) -> Value {
        let reply = (|| -> Result<Value> {
            let msg: Envelope = serde_json::from_str(text).context("malformed message")?;
            let payload = |v: Value| if v.is_null() { json!({}) } else { v };
            Ok(match msg.kind.as_str() {
                "action" => {
                    let p: ActionPayload = serde_json::from_value(msg.payload).context("action payload")?;
                    json!({"type": "state", "payload": self.act(&p.action)?})
                }
                "reset" => {
                    let p: ResetPayload = serde_json::from_value(payload(msg.payload)).context("reset payload")?;
                    json!({"type": "state", "payload": self.reset(p.seed)?})
                }
                "label_request" => {
                    let p: LabelPayload = serde_json::from_value(payload(msg.payload)).context("label payload")?;
                    json!({"type": "export", "payload": self.export(p.file.as_deref(), p.negatives)?})
                }
                other => bail!("unknown message type {other:?}"),
            })
        })();
        reply.unwrap_or_else(|e| json!({"type": "error", "payload": {"message": format!("{e:#}")}}))
    }
}

fn handle_connection(stream: TcpStream, opts: &ServeOptions, seed: u64) -> Result<()> {
    let mut ws = accept(stream).map_err(|e| anyhow::anyhow!("handshake failed: {e}"))?;
    let mut session = Session::new(opts, seed)?;
    let hello = json!({"type": "state", "payload": session.state()});
    ws.send(Message::text(hello.to_string()))?;
    loop {
        let msg = match ws.read() {
            Ok(m) => m,
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match msg {
            Message::Text(text) => {
                let reply = session.handle(text.as_str());
                ws.send(Message::text(reply.to_string()))?;
            }
            Message::Close(_) => return Ok(()),
            _ => {}
        }
    }
}

/// Accepts connections, one thread each; stops after `max_connections`
/// when given and waits for their sessions to end.
pub fn serve(listener: TcpListener, opts: ServeOptions, max_connections: Option<usize>) -> Result<()> {
    let opts = std::sync::Arc::new(opts);
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let opts = opts.clone();
        let seed = opts.seed.wrapping_add(i as u64);
        handles.push(thread::spawn(move || {
            if let Err(e) = handle_connection(stream, &opts, seed) {
                log::warn!("session {i} ended with error: {e:#}");
            }
        }));
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

pub fn run(args: &ServeArgs) -> Result<()> {
    let env = args.env.resolve()?;
    let constraints = args
        .constraints
        .as_deref()
        .map(|p| ConstraintNet::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let listener = TcpListener::bind(&args.addr).with_context(|| format!("binding {}", args.addr))?;
    log::info!("listening on ws://{}", listener.local_addr()?);
    serve(
        listener,
        ServeOptions {
            env,
            constraints,
            export_dir: args.export_dir.clone(),
            seed: args.seed,
        },
        None,
    )
}
