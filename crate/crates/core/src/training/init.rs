//! Parameter initialization.

use rand_distr::{Distribution, Normal, Uniform};

use crate::architectures::InitPolicy;
use crate::exec::ParamStore;
use crate::netgraph::ParamRole;
use crate::seeds;

/// Conv normal initializer standard deviation.
pub const CONV_NORMAL_STD: f64 = 0.05;

/// Initializes every tensor from its own stream, derived from `seed` and
/// the tensor name.
pub fn init_params(params: &mut ParamStore, policy: InitPolicy, seed: u64) {
    let root = seeds::derive(seed, "init");
    let specs = params.specs().to_vec();
    for (spec, values) in specs.iter().zip(params.values_mut()) {
        let mut rng = seeds::rng(seeds::derive(root, &spec.name));
        match spec.role {
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => values.fill(0.0),
            ParamRole::Gamma | ParamRole::RunningVar => values.fill(1.0),
            ParamRole::Weight => {
                let conv = spec.shape.len() == 4;
                let (fan_in, fan_out) = if conv {
                    let receptive = spec.shape[2] * spec.shape[3];
                    (spec.shape[1] * receptive, spec.shape[0] * receptive)
                } else {
                    (spec.shape[0], spec.shape[1])
                };
                let fans = (fan_in + fan_out) as f64;
                match (policy, conv) {
                    (InitPolicy::GlorotUniform, _) => {
                        let limit = (6.0 / fans).sqrt();
                        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                        values.iter_mut().for_each(|v| *v = dist.sample(&mut rng) as f32);
                    }
                    (InitPolicy::NormalConvGlorotNormalDense, true) => {
                        let dist = Normal::new(0.0, CONV_NORMAL_STD).expect("positive std");
                        values.iter_mut().for_each(|v| *v = dist.sample(&mut rng) as f32);
                    }
                    (InitPolicy::NormalConvGlorotNormalDense, false) => {
                        // truncated at two standard deviations, rescaled to keep the target variance
                        let std = (2.0 / fans).sqrt() / 0.879_625_661_034_239_8;
                        let unit = Normal::new(0.0, 1.0).expect("unit normal");
                        for v in values.iter_mut() {
                            let z = loop {
                                let z: f64 = unit.sample(&mut rng);
                                if z.abs() <= 2.0 {
                                    break z;
                                }
                            };
                            *v = (z * std) as f32;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{build_dtc, build_vgg_siamese, DtcConfig, VggClConfig};
    use crate::exec::Network;

    fn stats(v: &[f32]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        (mean, (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn glorot_uniform_bounds() {
        let spec = build_dtc(&DtcConfig::default()).unwrap();
        let net = Network::new(&spec.graph).unwrap();
        let mut p = net.zero_params();
        init_params(&mut p, spec.init, 1);
        let w = p.get("block1.layer1.conv.weight").unwrap();
        let limit = (6.0f64 / (32.0 * 9.0 + 12.0 * 9.0)).sqrt() as f32;
        assert!(w.iter().all(|x| x.abs() <= limit));
        assert!(p.get("block1.layer1.bn.gamma").unwrap().iter().all(|&g| g == 1.0));
        assert!(p.get("classifier.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn vgg_initializers() {
        let spec = build_vgg_siamese(&VggClConfig::default()).unwrap();
        let net = Network::new(&spec.graph).unwrap();
        let mut p = net.zero_params();
        init_params(&mut p, spec.init, 2);
        let (m, s) = stats(p.get("a/block2.conv1.weight").unwrap());
        assert!(m.abs() < 0.01 && (s - 0.05).abs() < 0.005, "{m} {s}");
        let e = p.get("a/embedding.weight").unwrap();
        let target = (2.0f64 / (1600.0 + 2048.0)).sqrt();
        let (m, s) = stats(e);
        assert!(m.abs() < 1e-3 && (s - target).abs() / target < 0.02, "{m} {s} {target}");
        let cap = (2.0 * target / 0.879_625_661_034_239_8) as f32 * 1.0001;
        assert!(e.iter().all(|x| x.abs() <= cap));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = build_dtc(&DtcConfig::default()).unwrap();
        let net = Network::new(&spec.graph).unwrap();
        let (mut a, mut b, mut c) = (net.zero_params(), net.zero_params(), net.zero_params());
        init_params(&mut a, spec.init, 5);
        init_params(&mut b, spec.init, 5);
        init_params(&mut c, spec.init, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
