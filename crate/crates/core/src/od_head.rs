//! Origin distribution and low-rank OD matrix conditioned on the hidden
//! state plus time-head parameters.

use std::io::Write;
use std::path::Path;

use amtpp_autodiff::{Graph, ParamId, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{AmtppError, Result};
use crate::init::{glorot, zeros};

/// Forbidden OD pairs, origin-major. The diagonal is always forbidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OdMask {
    stations: usize,
    forbidden: Vec<bool>,
}

impl OdMask {
    pub fn diagonal(stations: usize) -> Self {
        let mut forbidden = vec![false; stations * stations];
        for s in 0..stations {
            forbidden[s * stations + s] = true;
        }
        Self { stations, forbidden }
    }

    pub fn stations(&self) -> usize {
        self.stations
    }

    pub fn forbid(&mut self, o: usize, d: usize) -> Result<()> {
        if o >= self.stations || d >= self.stations {
            return Err(AmtppError::UnknownStation {
                station: o.max(d),
                stations: self.stations,
            });
        }
        self.forbidden[o * self.stations + d] = true;
        if (0..self.stations).all(|x| self.forbidden[o * self.stations + x]) {
            self.forbidden[o * self.stations + d] = o == d;
            return Err(AmtppError::Data(format!("every destination from origin {o} is forbidden")));
        }
        Ok(())
    }

    pub fn is_forbidden(&self, o: usize, d: usize) -> bool {
        self.forbidden[o * self.stations + d]
    }

    /// `S x S` flags indexed `[o * S + d]`.
    pub fn flags(&self) -> &[bool] {
        &self.forbidden
    }

    /// Forbidden pairs beyond the diagonal.
    pub fn extra_pairs(&self) -> Vec<(usize, usize)> {
        let s = self.stations;
        (0..s * s).filter(|i| self.forbidden[*i] && i / s != i % s).map(|i| (i / s, i % s)).collect()
    }

    /// Reads `o,d` rows of forbidden pairs on top of the diagonal.
    pub fn load_csv(path: impl AsRef<Path>, stations: usize) -> Result<Self> {
        let path = path.as_ref();
        let source = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| AmtppError::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let mut mask = Self::diagonal(stations);
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let perr = |msg: String| AmtppError::Parse {
                path: source.clone(),
                line,
                msg,
            };
            let row = row.map_err(|e| perr(e.to_string()))?;
            if row.len() != 2 {
                return Err(perr(format!("expected 2 fields, got {}", row.len())));
            }
            let o: usize = row[0].parse().map_err(|e| perr(format!("o: {e}")))?;
            let d: usize = row[1].parse().map_err(|e| perr(format!("d: {e}")))?;
            mask.forbid(o, d).map_err(|e| perr(e.to_string()))?;
        }
        Ok(mask)
    }
}

/// Column-stochastic matrix, entry `(d, o) = P(d | o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdMatrix {
    pub stations: usize,
    /// Row-major `[d][o]`.
    pub values: Vec<f64>,
}

impl OdMatrix {
    /// From origin-major log conditionals `log P(d | o)` at `[o * S + d]`.
    pub fn from_log_conditionals(stations: usize, log_p: &[f64]) -> Self {
        let mut values = vec![0.0; stations * stations];
        for o in 0..stations {
            for d in 0..stations {
                values[d * stations + o] = log_p[o * stations + d].exp();
            }
        }
        Self { stations, values }
    }

    pub fn get(&self, d: usize, o: usize) -> f64 {
        self.values[d * self.stations + o]
    }

    pub fn column(&self, o: usize) -> Vec<f64> {
        (0..self.stations).map(|d| self.get(d, o)).collect()
    }

    /// `OD · origin`.
    pub fn destination_distribution(&self, origin: &[f64]) -> Vec<f64> {
        (0..self.stations)
            .map(|d| (0..self.stations).map(|o| self.get(d, o) * origin[o]).sum())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        write!(w, "d\\o")?;
        for o in 0..self.stations {
            write!(w, ",{o}")?;
        }
        writeln!(w)?;
        for d in 0..self.stations {
            write!(w, "{d}")?;
            for o in 0..self.stations {
                write!(w, ",{:.9}", self.get(d, o))?;
            }
            writeln!(w)?;
        }
        w.flush()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdHeadKind {
    /// Destination from the low-rank OD matrix applied to the origin
    /// distribution.
    LowRank,
    /// Separate affine + softmax heads for origin and destination.
    Independent,
}

impl OdHeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LowRank => "low_rank",
            Self::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low_rank" => Some(Self::LowRank),
            "independent" => Some(Self::Independent),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OdVars {
    /// `[..., S]`
    pub log_origin: Var,
    /// `[..., S]`
    pub log_destination: Var,
    /// `[N, S, S]` origin-major `log P(d | o)`; low-rank head only.
    pub log_conditional: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct OdHead {
    pub kind: OdHeadKind,
    pub stations: usize,
    pub rank: usize,
    origin: (ParamId, ParamId),
    factors: Option<(ParamId, ParamId)>,
    destination: Option<(ParamId, ParamId)>,
}

impl OdHead {
    pub fn register(store: &mut ParamStore, input: usize, stations: usize, rank: usize, kind: OdHeadKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        let origin = (glorot(store, "od.origin.weight", input, stations, rng)?, zeros(store, "od.origin.bias", vec![stations])?);
        let (factors, destination) = match kind {
            OdHeadKind::LowRank => {
                if rank == 0 {
                    return Err(AmtppError::Config("OD rank must be at least 1".into()));
                }
                (
                    Some((
                        glorot(store, "od.m1.weight", input, stations * rank, rng)?,
                        glorot(store, "od.m2.weight", input, stations * rank, rng)?,
                    )),
                    None,
                )
            }
            OdHeadKind::Independent => (
                None,
                Some((glorot(store, "od.destination.weight", input, stations, rng)?, zeros(store, "od.destination.bias", vec![stations])?)),
            ),
        };
        Ok(Self {
            kind,
            stations,
            rank,
            origin,
            factors,
            destination,
        })
    }

    /// `ctx` is `[B, T, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ctx: Var, mask: &OdMask) -> Result<OdVars> {
        let s = self.stations;
        let affine = |g: &mut Graph, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let (w, b) = (g.param(store, w), g.param(store, b));
            let z = g.matmul(ctx, w)?;
            Ok(g.add(z, b)?)
        };
        let origin_logits = affine(g, self.origin)?;
        let log_origin = g.log_softmax(origin_logits)?;
        if let Some(dest) = self.destination {
            let logits = affine(g, dest)?;
            let log_destination = g.log_softmax(logits)?;
            return Ok(OdVars {
                log_origin,
                log_destination,
                log_conditional: None,
            });
        }
        let (m1, m2) = self.factors.expect("low-rank head has factors");
        let cs = g.shape(ctx).to_vec();
        let rows: usize = cs[..cs.len() - 1].iter().product();
        let (m1, m2) = (g.param(store, m1), g.param(store, m2));
        let d1 = g.matmul(ctx, m1)?;
        let d1 = g.reshape(d1, vec![rows, s, self.rank])?;
        let d2 = g.matmul(ctx, m2)?;
        let d2 = g.reshape(d2, vec![rows, s, self.rank])?;
        // scores_t[o][d] = D2[o] · D1[d]
        let d1_t = g.transpose(d1)?;
        let scores_t = g.matmul(d2, d1_t)?;
        let masked = g.masked_fill(scores_t, mask.flags(), f64::NEG_INFINITY)?;
        let log_cond = g.log_softmax(masked)?;
        let lo = g.reshape(log_origin, vec![rows, s, 1])?;
        let joint = g.add(log_cond, lo)?;
        let joint_t = g.transpose(joint)?;
        let log_dest = g.logsumexp(joint_t)?;
        let mut out_shape = cs[..cs.len() - 1].to_vec();
        out_shape.push(s);
        let log_destination = g.reshape(log_dest, out_shape)?;
        Ok(OdVars {
            log_origin,
            log_destination,
            log_conditional: Some(log_cond),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_one_hot_selects_column() {
        let m = OdMatrix {
            stations: 3,
            values: vec![0.0, 0.2, 0.5, 0.7, 0.0, 0.5, 0.3, 0.8, 0.0],
        };
        assert_eq!(m.destination_distribution(&[0.0, 1.0, 0.0]), m.column(1));
    }

    #[test]
    fn mask_rejects_dead_origin() {
        let mut m = OdMask::diagonal(3);
        m.forbid(0, 1).unwrap();
        assert!(m.forbid(0, 2).is_err());
        assert_eq!(m.extra_pairs(), vec![(0, 1)]);
    }

    #[test]
    fn export_has_nine_decimals() {
        let m = OdMatrix {
            stations: 2,
            values: vec![0.0, 1.0, 1.0, 0.0],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "d\\o,0,1\n0,0.000000000,1.000000000\n1,1.000000000,0.000000000\n");
    }
}
