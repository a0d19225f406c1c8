//! Collapses observations with identical covariates (and weight) into classes.
//!
//! The sample potential system only depends on the distinct worker and firm
//! rows, so it can be solved on the `C x D` class table with class masses and
//! expanded back exactly: for observation `i` in class `c`,
//! `a_i = a_c + log(M_c / w_i)` before renormalizing `a_0 = 0`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::equilibrium::Potentials;
use crate::model::{Covariates, MatchSample};

#[derive(Debug, Clone, PartialEq)]
pub struct SideClasses {
    /// Class of each observation, numbered in order of first appearance.
    pub class_of: Vec<usize>,
    /// First observation of each class.
    pub representative: Vec<usize>,
    /// Total weight of each class.
    pub mass: Vec<f64>,
    /// `log(M_c / w_i)` per observation.
    pub log_ratio: Vec<f64>,
}

impl SideClasses {
    pub fn build(cov: &Covariates, weights: &[f64]) -> Self {
        let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut class_of = Vec::with_capacity(cov.rows());
        let mut representative = Vec::new();
        let mut mass: Vec<f64> = Vec::new();
        for i in 0..cov.rows() {
            // + 0.0 folds -0.0 into 0.0
            let mut key: Vec<u64> = cov.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
            key.push(weights[i].to_bits());
            let next = representative.len();
            let c = *index.entry(key).or_insert(next);
            if c == next {
                representative.push(i);
                mass.push(0.0);
            }
            mass[c] += weights[i];
            class_of.push(c);
        }
        let log_ratio = class_of.iter().zip(weights).map(|(&c, w)| libm::log(mass[c] / w)).collect();
        Self { class_of, representative, mass, log_ratio }
    }

    pub fn len(&self) -> usize {
        self.representative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representative.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub workers: SideClasses,
    pub firms: SideClasses,
}

impl ClassMap {
    pub fn build(sample: &MatchSample) -> Self {
        Self {
            workers: SideClasses::build(sample.workers(), sample.weights()),
            firms: SideClasses::build(sample.firms(), sample.weights()),
        }
    }

    /// Expands class potentials to observation potentials with `a_0 = 0`.
    pub fn expand(&self, class: &Potentials) -> Potentials {
        let w = &self.workers;
        let f = &self.firms;
        let mut a: Vec<f64> = w.class_of.iter().zip(&w.log_ratio).map(|(&c, r)| class.a[c] + r).collect();
        let mut b: Vec<f64> = f.class_of.iter().zip(&f.log_ratio).map(|(&c, r)| class.b[c] + r).collect();
        let shift = a[0];
        a.iter_mut().for_each(|v| *v -= shift);
        b.iter_mut().for_each(|v| *v += shift);
        a[0] = 0.0;
        Potentials { a, b, iterations: class.iterations, residual: class.residual }
    }
}
