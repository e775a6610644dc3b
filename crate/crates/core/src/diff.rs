//! Gradient plumbing shared by training and fitting: flat parameter vectors
//! with named segments, scalar objectives with analytic gradients, a central
//! finite-difference fallback for verification, and an Adam optimizer.

use crate::error::{Error, Result};

/// A flat `f64` vector split into named, contiguous segments (for example
/// `beta`, `pose6d_0`, `trans_1`). Optimizers treat it as one vector;
/// objectives address segments by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    names: Vec<String>,
    spans: Vec<(usize, usize)>, // (start, len) per segment
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        ParamVector {
            names: Vec::new(),
            spans: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_segment(&mut self, name: &str, values: &[f64]) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::parameter(format!("duplicate parameter segment '{name}'")));
        }
        if values.is_empty() {
            return Err(Error::parameter(format!("parameter segment '{name}' is empty")));
        }
        self.names.push(name.to_string());
        self.spans.push((self.values.len(), values.len()));
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    fn span(&self, name: &str) -> Result<(usize, usize)> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.spans[i])
            .ok_or_else(|| Error::parameter(format!("unknown parameter segment '{name}'")))
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let (start, len) = self.span(name)?;
        Ok(&self.values[start..start + len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let (start, len) = self.span(name)?;
        Ok(&mut self.values[start..start + len])
    }

    /// Same names and spans, all values zero — the shape a gradient comes in.
    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            names: self.names.clone(),
            spans: self.spans.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.names == other.names && self.spans == other.spans
    }

    /// Which segment a flat index falls in; used to name failures.
    pub fn segment_of_index(&self, index: usize) -> &str {
        for (i, &(start, len)) in self.spans.iter().enumerate() {
            if index >= start && index < start + len {
                return &self.names[i];
            }
        }
        "<out of range>"
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

/// A scalar objective over a parameter vector, with an analytic gradient.
pub trait ScalarFunction {
    fn value(&self, params: &ParamVector) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Evaluates the gradient and rejects non-finite values, naming the first
/// offending segment so optimizer failures point at the responsible term.
pub fn gradient(f: &dyn ScalarFunction, params: &ParamVector) -> Result<(f64, ParamVector)> {
    let (value, grad) = f.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::numeric(format!("objective value is not finite ({value})")));
    }
    if !grad.same_layout(params) {
        return Err(Error::numeric(
            "gradient layout does not match the parameter layout".to_string(),
        ));
    }
    for (i, g) in grad.values().iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::numeric(format!(
                "gradient is not finite in segment '{}' (component {i}: {g})",
                grad.segment_of_index(i)
            )));
        }
    }
    Ok((value, grad))
}

/// Central finite differences with an absolute step; the verification
/// oracle for every analytic gradient in the crate.
pub fn finite_difference(
    f: &dyn ScalarFunction,
    params: &ParamVector,
    step: f64,
) -> Result<ParamVector> {
    if !(step > 0.0) {
        return Err(Error::parameter(format!("finite-difference step must be positive, got {step}")));
    }
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.len() {
        let x = params.values()[i];
        probe.values_mut()[i] = x + step;
        let hi = f.value(&probe)?;
        probe.values_mut()[i] = x - step;
        let lo = f.value(&probe)?;
        probe.values_mut()[i] = x;
        grad.values_mut()[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::parameter(format!(
                "invalid Adam configuration: lr {}, beta1 {}, beta2 {}, epsilon {}",
                self.learning_rate, self.beta1, self.beta2, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction. First and second moments live in flat arrays
/// matching the parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamState {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if params.len() != self.m.len() || !grad.same_layout(params) {
            return Err(Error::parameter(
                "optimizer state, parameters, and gradient sizes disagree".to_string(),
            ));
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let g = grad.values();
        let x = params.values_mut();
        for i in 0..x.len() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g[i];
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            x[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
        }
        Ok(())
    }
}
