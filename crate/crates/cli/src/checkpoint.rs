//! Plain-text checkpoint: a `key = value` header, a `params` line, then one
//! parameter per line in shortest round-trip decimal form.

use std::fmt::Write as _;
use std::path::Path;

use mfc_dgm::model::MfcpSpec;
use mfc_dgm::network::{Architecture, LayerKind, Network, ParameterVector};
use mfc_dgm::solver::NetworkValue;

use crate::config::{example_problem, parse_costs, render_costs};
use crate::error::CliError;

const MAGIC: &str = "mfc-dgm checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub problem: MfcpSpec,
    pub params: ParameterVector,
}

impl Checkpoint {
    pub fn new(arch: Architecture, problem: MfcpSpec, params: ParameterVector) -> Result<Self, CliError> {
        if arch.param_count() != params.len() {
            return Err(CliError::Config(format!(
                "checkpoint has {} parameters, architecture expects {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, problem, params })
    }

    pub fn render(&self) -> String {
        let mut s = String::with_capacity(24 * self.params.len() + 256);
        let _ = writeln!(s, "{MAGIC}");
        let kind = match self.arch.kind {
            LayerKind::Gated => "gated",
            LayerKind::Plain => "plain",
        };
        let _ = writeln!(s, "kind = {kind}");
        let _ = writeln!(s, "depth = {}", self.arch.depth);
        let _ = writeln!(s, "width = {}", self.arch.width);
        let _ = writeln!(s, "dim = {}", self.arch.dim);
        let _ = writeln!(s, "horizon = {}", self.problem.horizon);
        let _ = writeln!(s, "max_rate = {}", self.problem.max_rate);
        let _ = writeln!(s, "costs = {}", render_costs(&self.problem.cost));
        let _ = writeln!(s, "params = {}", self.params.len());
        for v in self.params.as_slice() {
            let _ = writeln!(s, "{v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(CliError::Config("not a checkpoint file (missing header line)".into()));
        }
        let mut header = Vec::new();
        let count: usize = loop {
            let line = lines
                .next()
                .ok_or_else(|| CliError::Config("checkpoint header ends early".into()))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("malformed checkpoint header line '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "params" {
                break v.parse().map_err(|_| CliError::Config(format!("bad parameter count '{v}'")))?;
            }
            header.push((k.to_string(), v.to_string()));
        };
        let field = |k: &str| {
            header
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| CliError::Config(format!("checkpoint header lacks '{k}'")))
        };
        let num = |k: &str| -> Result<f64, CliError> {
            let v = field(k)?;
            v.parse().map_err(|_| CliError::Config(format!("bad checkpoint value '{v}' for '{k}'")))
        };
        let int = |k: &str| -> Result<usize, CliError> {
            let v = field(k)?;
            v.parse().map_err(|_| CliError::Config(format!("bad checkpoint value '{v}' for '{k}'")))
        };
        let kind = match field("kind")? {
            "gated" => LayerKind::Gated,
            "plain" => LayerKind::Plain,
            other => return Err(CliError::Config(format!("unknown layer kind '{other}' in checkpoint"))),
        };
        let dim = int("dim")?;
        let arch = Architecture::new(dim, kind, int("depth")?, int("width")?);
        arch.validate()?;
        let problem = example_problem(dim, num("horizon")?, num("max_rate")?, parse_costs(field("costs")?, dim)?)?;
        let params = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("bad parameter value '{l}' in checkpoint")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if params.len() != count {
            return Err(CliError::Config(format!("checkpoint declares {count} parameters but holds {}", params.len())));
        }
        Self::new(arch, problem, ParameterVector::new(params))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.render()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn value_function(&self) -> Result<NetworkValue, CliError> {
        Ok(NetworkValue::new(Network::new(self.arch.clone())?, self.params.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mfc_dgm::model::CostMatrix;

    #[test]
    fn round_trip_is_exact() {
        let arch = Architecture::new(3, LayerKind::Gated, 2, 5);
        let net = Network::new(arch.clone()).unwrap();
        let problem = example_problem(3, 2.0, 1.5, CostMatrix::from_rows(vec![vec![0.0, 0.5, 2.0], vec![1.0, 0.0, 3.0], vec![1.0, 1.0, 0.0]]).unwrap()).unwrap();
        let ck = Checkpoint::new(arch, problem, net.init_params(4)).unwrap();
        let back = Checkpoint::parse(&ck.render()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let arch = Architecture::new(2, LayerKind::Plain, 2, 3);
        let net = Network::new(arch.clone()).unwrap();
        let ck = Checkpoint::new(arch, mfc_dgm::model::MfcpSpec::example(2), net.init_params(0)).unwrap();
        let text = ck.render();
        assert!(Checkpoint::parse(&text.replacen("mfc-dgm", "xyz", 1)).is_err());
        let truncated: String = text.lines().take(text.lines().count() - 1).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::parse(&truncated).is_err());
        assert!(Checkpoint::parse(&text.replace("width = 3", "width = 4")).is_err());
    }
}
