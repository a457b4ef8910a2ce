// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trained models, the algorithm registry, and the checkpoint container.
//!
//! Checkpoint layout (all header text is ASCII, one `key=value` per line):
//!
//! ```text
//! ios-lab-checkpoint v1
//! algorithm=do-iqs-lb
//! ...                      (architecture, schedule state, seed)
//! tensor=net 5058          (name and element count, in payload order)
//! tensor=gnet 1153
//! end
//! <payload: every tensor as little-endian f64, concatenated>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{rows_to_array, GNet, MultiHeadNet};
use crate::smdp::{discount_pow, stop_decision, QPair, StatePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    Classifier,
    ClassifierSmote,
    Iqs,
    IqsSmote,
    IqsCsSmote,
    MbIqs,
    MbIqsSmote,
    MbIqsCsSmote,
    DoIqs,
    DoIqsLb,
}

impl Algorithm {
    pub const ALL: [Algorithm; 10] = [
        Algorithm::Classifier,
        Algorithm::ClassifierSmote,
        Algorithm::Iqs,
        Algorithm::IqsSmote,
        Algorithm::IqsCsSmote,
        Algorithm::MbIqs,
        Algorithm::MbIqsSmote,
        Algorithm::MbIqsCsSmote,
        Algorithm::DoIqs,
        Algorithm::DoIqsLb,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Classifier => "classifier",
            Algorithm::ClassifierSmote => "classifier-smote",
            Algorithm::Iqs => "iqs",
            Algorithm::IqsSmote => "iqs-smote",
            Algorithm::IqsCsSmote => "iqs-cs-smote",
            Algorithm::MbIqs => "mb-iqs",
            Algorithm::MbIqsSmote => "mb-iqs-smote",
            Algorithm::MbIqsCsSmote => "mb-iqs-cs-smote",
            Algorithm::DoIqs => "do-iqs",
            Algorithm::DoIqsLb => "do-iqs-lb",
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, Algorithm::Classifier | Algorithm::ClassifierSmote)
    }

    pub fn uses_smote(self) -> bool {
        matches!(
            self,
            Algorithm::ClassifierSmote
                | Algorithm::IqsSmote
                | Algorithm::IqsCsSmote
                | Algorithm::MbIqsSmote
                | Algorithm::MbIqsCsSmote
        )
    }

    /// Synthetic records carry the decaying confidence α instead of weight 1.
    pub fn confidence_weighted(self) -> bool {
        matches!(self, Algorithm::IqsCsSmote | Algorithm::MbIqsCsSmote)
    }

    pub fn model_based(self) -> bool {
        matches!(
            self,
            Algorithm::MbIqs
                | Algorithm::MbIqsSmote
                | Algorithm::MbIqsCsSmote
                | Algorithm::DoIqs
                | Algorithm::DoIqsLb
        )
    }

    /// Learns `g_φ` and feeds `(s, y)` to the Q network.
    pub fn augmented(self) -> bool {
        matches!(self, Algorithm::DoIqs | Algorithm::DoIqsLb)
    }

    pub fn local_bootstrap(self) -> bool {
        self == Algorithm::DoIqsLb
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        Algorithm::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| invalid(format!("unknown algorithm `{s}`")))
    }
}

impl TryFrom<String> for Algorithm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.tag().to_string()
    }
}

/// A frozen network snapshot together with the schedule state it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub algorithm: Algorithm,
    pub net: MultiHeadNet,
    pub gnet: Option<GNet>,
    pub gamma: f64,
    pub seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Model {
    pub fn is_augmented(&self) -> bool {
        self.gnet.is_some()
    }

    /// Q pairs of bare inputs. Augmented models need path context and refuse.
    pub fn q_pairs(&self, rows: &[Vec<f64>]) -> Result<Vec<QPair>> {
        if self.is_augmented() {
            return Err(invalid(
                "augmented model needs path prefixes; use path decisions instead",
            ));
        }
        self.raw_q(rows)
    }

    fn raw_q(&self, rows: &[Vec<f64>]) -> Result<Vec<QPair>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.net.forward(rows_to_array(rows))?;
        Ok(c.q.rows().into_iter().map(|r| QPair::new(r[0], r[1])).collect())
    }

    /// Running `y_t = Σ_{k≤t} γ^k g_φ(s_k)` along a path prefix.
    pub fn cumulative_gains(&self, states: &[StatePoint]) -> Result<Vec<f64>> {
        let g = self
            .gnet
            .as_ref()
            .ok_or_else(|| invalid("model has no continuation-gain network"))?;
        let refs: Vec<&StatePoint> = states.iter().collect();
        let gains = g.gains(&refs)?;
        let mut y = 0.0;
        Ok(gains
            .iter()
            .enumerate()
            .map(|(t, v)| {
                y += discount_pow(self.gamma, t) * v;
                y
            })
            .collect())
    }

    /// Q pairs along one path starting at `t = 0`; augmented models roll `y`.
    pub fn path_q(&self, states: &[StatePoint]) -> Result<Vec<QPair>> {
        let rows: Vec<Vec<f64>> = if self.is_augmented() {
            let ys = self.cumulative_gains(states)?;
            states
                .iter()
                .zip(ys)
                .map(|(s, y)| {
                    let mut r = s.coords().to_vec();
                    r.push(y);
                    r
                })
                .collect()
        } else {
            states.iter().map(|s| s.coords().to_vec()).collect()
        };
        self.raw_q(&rows)
    }

    /// Greedy stop labels along one path.
    pub fn path_decisions(&self, states: &[StatePoint]) -> Result<Vec<bool>> {
        Ok(self.path_q(states)?.into_iter().map(stop_decision).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Model::read_from(&mut std::io::BufReader::new(f))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut h = BTreeMap::new();
        h.insert("algorithm", self.algorithm.tag().to_string());
        h.insert("seed", self.seed.to_string());
        h.insert("epoch", self.epoch.to_string());
        h.insert("gamma", f64_text(self.gamma));
        h.insert("lr", f64_text(self.lr));
        h.insert("epsilon", f64_text(self.epsilon));
        h.insert("alpha", f64_text(self.alpha));
        h.insert("net.input", self.net.input_dim().to_string());
        h.insert("net.hidden", join(self.net.hidden()));
        h.insert("net.dyn_out", self.net.dyn_out().map_or("none".into(), |d| d.to_string()));
        h.insert("net.share_trunk", self.net.shares_trunk().to_string());
        if let Some(g) = &self.gnet {
            h.insert("gnet.input", g.input_dim().to_string());
            h.insert("gnet.hidden", join(g.hidden()));
        }
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &h {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "tensor=net {}", self.net.params.len())?;
        if let Some(g) = &self.gnet {
            writeln!(w, "tensor=gnet {}", g.params.len())?;
        }
        writeln!(w, "end")?;
        let mut bytes = Vec::new();
        for v in self.net.params.iter().chain(self.gnet.iter().flat_map(|g| g.params.iter())) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("missing magic line"));
        }
        let mut h: BTreeMap<String, String> = BTreeMap::new();
        let mut tensors: Vec<(String, usize)> = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("header not terminated"));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad("header line without `=`"))?;
            if k == "tensor" {
                let (name, n) = v.split_once(' ').ok_or_else(|| bad("tensor line"))?;
                let n = n.parse().map_err(|_| bad("tensor length"))?;
                tensors.push((name.to_string(), n));
            } else {
                h.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| h.get(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`"))) };
        let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`"))) };
        let algorithm: Algorithm = get("algorithm")?.parse().map_err(|_| bad("algorithm"))?;
        let dyn_out = match get("net.dyn_out")?.as_str() {
            "none" => None,
            d => Some(d.parse().map_err(|_| bad("net.dyn_out"))?),
        };
        let share = get("net.share_trunk")? == "true";
        let mut net = MultiHeadNet::new(int("net.input")? as usize, &split(get("net.hidden")?)?, dyn_out, share, 0)?;
        let mut gnet = match h.get("gnet.input") {
            Some(i) => Some(GNet::new(
                i.parse().map_err(|_| bad("gnet.input"))?,
                &split(get("gnet.hidden")?)?,
                0,
            )?),
            None => None,
        };
        for (name, n) in &tensors {
            let target = match name.as_str() {
                "net" => &mut net.params,
                "gnet" => &mut gnet.as_mut().ok_or_else(|| bad("gnet tensor without gnet header"))?.params,
                other => return Err(Error::Checkpoint(format!("unknown tensor `{other}`"))),
            };
            if target.len() != *n {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has {n} values, architecture needs {}",
                    target.len()
                )));
            }
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|_| bad("payload shorter than header declares"))?;
            for (v, c) in target.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        if tensors.iter().all(|(n, _)| n != "net") || (gnet.is_some() && tensors.len() != 2) {
            return Err(bad("missing tensor"));
        }
        Ok(Model {
            algorithm,
            net,
            gnet,
            gamma: num("gamma")?,
            seed: int("seed")?,
            epoch: int("epoch")? as usize,
            lr: num("lr")?,
            epsilon: num("epsilon")?,
            alpha: num("alpha")?,
        })
    }
}

const MAGIC: &str = "ios-lab-checkpoint v1";

/// Shortest text that parses back to the same bits.
fn f64_text(v: f64) -> String {
    format!("{v:?}")
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Checkpoint(format!("bad width list `{s}`"))))
        .collect()
}
