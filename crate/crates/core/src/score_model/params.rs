//! Parameter collections keyed by layer path, seeded initialization and the
//! exponential-moving-average shadow.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{stream, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
}

struct FreshState {
    rng: ChaCha8Rng,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

#[derive(Clone)]
enum Backing {
    Fresh(Rc<RefCell<FreshState>>),
    Existing(Rc<BTreeMap<String, Tensor>>),
}

/// Hands out parameter tensors by path, either creating them from a seeded
/// generator or looking them up in an existing collection.
///
/// Building a model twice from the same fresh source seed draws parameters in
/// the same order, so initialization is reproducible.
#[derive(Clone)]
pub struct ParamSource {
    backing: Backing,
    prefix: String,
}

impl ParamSource {
    pub fn fresh(dtype: DType, seed: u64) -> Self {
        Self {
            backing: Backing::Fresh(Rc::new(RefCell::new(FreshState {
                rng: stream(seed, Purpose::Init, 0),
                dtype,
                vars: BTreeMap::new(),
            }))),
            prefix: String::new(),
        }
    }

    pub fn existing(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            backing: Backing::Existing(Rc::new(tensors)),
            prefix: String::new(),
        }
    }

    /// Source scoped to `prefix.name`.
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            backing: self.backing.clone(),
            prefix,
        }
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let path = self.pp(name).prefix;
        match &self.backing {
            Backing::Fresh(state) => {
                let mut state = state.borrow_mut();
                if state.vars.contains_key(&path) {
                    return Err(Error::Config(format!("duplicate parameter path `{path}`")));
                }
                let n: usize = dims.iter().product();
                let values: Vec<f64> = match init {
                    Init::Uniform(bound) => (0..n)
                        .map(|_| state.rng.random_range(-bound..=bound))
                        .collect(),
                    Init::Const(c) => vec![c; n],
                };
                let tensor = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(state.dtype)?;
                let var = Var::from_tensor(&tensor)?;
                let out = var.as_tensor().clone();
                state.vars.insert(path, var);
                Ok(out)
            }
            Backing::Existing(map) => {
                let t = map
                    .get(&path)
                    .ok_or_else(|| Error::Config(format!("missing parameter `{path}`")))?;
                if t.dims() != dims {
                    return Err(Error::Dimension(format!(
                        "parameter `{path}` has shape {:?}, expected {dims:?}",
                        t.dims()
                    )));
                }
                Ok(t.clone())
            }
        }
    }

    /// Variables created so far by a fresh source.
    pub fn into_vars(self) -> Result<BTreeMap<String, Var>> {
        match self.backing {
            Backing::Fresh(state) => Ok(state.borrow().vars.clone()),
            Backing::Existing(_) => Err(Error::Config(
                "parameter source is backed by an existing collection".into(),
            )),
        }
    }
}

/// Learnable parameters, their EMA shadow and the number of optimizer steps taken.
#[derive(Debug, Clone)]
pub struct ScoreNetParams {
    pub live: BTreeMap<String, Var>,
    pub ema: BTreeMap<String, Tensor>,
    pub step_count: u64,
}

impl ScoreNetParams {
    /// Wraps freshly created variables; the EMA shadow starts as a copy.
    pub fn from_vars(live: BTreeMap<String, Var>) -> Result<Self> {
        let ema = live
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect::<Result<_>>()?;
        Ok(Self {
            live,
            ema,
            step_count: 0,
        })
    }

    /// Live tensors sharing storage with the variables.
    pub fn live_tensors(&self) -> BTreeMap<String, Tensor> {
        self.live
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn ema_tensors(&self) -> BTreeMap<String, Tensor> {
        self.ema.clone()
    }

    pub fn num_parameters(&self) -> usize {
        self.live.values().map(|v| v.elem_count()).sum()
    }

    /// `ema <- decay * ema + (1 - decay) * live` for every parameter.
    pub fn update_ema(&mut self, decay: f64) -> Result<()> {
        for (name, var) in &self.live {
            let shadow = self
                .ema
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("EMA shadow lacks `{name}`")))?;
            let live = var.as_tensor().detach();
            *shadow = ((&*shadow * decay)? + (live * (1.0 - decay))?)?;
        }
        Ok(())
    }

    /// Checks that the shadow has exactly the live key set and shapes.
    pub fn validate(&self) -> Result<()> {
        if self.live.len() != self.ema.len() {
            return Err(Error::Config(format!(
                "EMA shadow has {} tensors, live parameters {}",
                self.ema.len(),
                self.live.len()
            )));
        }
        for (name, var) in &self.live {
            match self.ema.get(name) {
                Some(t) if t.dims() == var.dims() => {}
                Some(t) => {
                    return Err(Error::Dimension(format!(
                        "EMA `{name}` has shape {:?}, live {:?}",
                        t.dims(),
                        var.dims()
                    )))
                }
                None => return Err(Error::Config(format!("EMA shadow lacks `{name}`"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ScoreNetParams {
        let src = ParamSource::fresh(DType::F64, 1);
        src.get(&[1], "a", Init::Const(0.0)).unwrap();
        src.get(&[1], "b", Init::Const(0.0)).unwrap();
        ScoreNetParams::from_vars(src.into_vars().unwrap()).unwrap()
    }

    #[test]
    fn ema_matches_closed_form_recurrence() {
        let mut p = toy();
        let decay = 0.9;
        let ema0 = [0.0f64, 0.0];
        let thetas: Vec<[f64; 2]> = (0..7).map(|j| [j as f64 * 0.5 - 1.0, (j * j) as f64 * 0.1]).collect();
        for th in &thetas {
            p.live["a"].set(&Tensor::new(&[th[0]], &Device::Cpu).unwrap()).unwrap();
            p.live["b"].set(&Tensor::new(&[th[1]], &Device::Cpu).unwrap()).unwrap();
            p.update_ema(decay).unwrap();
        }
        let k = thetas.len() as i32;
        for (idx, key) in ["a", "b"].iter().enumerate() {
            let mut expected = decay.powi(k) * ema0[idx];
            for (j, th) in thetas.iter().enumerate() {
                expected += (1.0 - decay) * decay.powi(k - 1 - j as i32) * th[idx];
            }
            let got = p.ema[*key].to_vec1::<f64>().unwrap()[0];
            assert!((got - expected).abs() < 1e-12, "{key}: {got} vs {expected}");
        }
    }

    #[test]
    fn ema_starts_as_copy_and_is_independent_storage() {
        let p = toy();
        p.validate().unwrap();
        p.live["a"].set(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(p.ema["a"].to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let src = ParamSource::fresh(DType::F32, 0);
        src.get(&[2], "w", Init::Const(1.0)).unwrap();
        assert!(src.get(&[2], "w", Init::Const(1.0)).is_err());
    }

    #[test]
    fn existing_source_checks_shapes() {
        let mut map = BTreeMap::new();
        map.insert("l.w".to_string(), Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap());
        let src = ParamSource::existing(map);
        assert!(src.pp("l").get(&[2, 3], "w", Init::Const(0.0)).is_ok());
        assert!(matches!(src.pp("l").get(&[3, 2], "w", Init::Const(0.0)), Err(Error::Dimension(_))));
        assert!(matches!(src.get(&[1], "missing", Init::Const(0.0)), Err(Error::Config(_))));
    }
}
