use ndarray::{Array1, Array4, ArrayView4, Axis, Zip};

use crate::error::{Error, Result};
use crate::models::{AuxModelSet, ModelHandle, Probe};
use crate::nn::{ops, LayerId};

/// Lower bound on the clean-feature norm in the FDA distance term.
pub const FDA_NORM_FLOOR: f64 = 1e-12;

/// Per-example mean (over models) cross-entropy to `proxy`, and its
/// gradient with respect to `x`.
pub fn tmim_loss_and_grad(
    models: &[&ModelHandle],
    x: &ArrayView4<f64>,
    proxy: usize,
) -> Result<(Array1<f64>, Array4<f64>)> {
    let n = x.dim().0;
    let m = models.len() as f64;
    let mut loss = Array1::zeros(n);
    let mut grad = Array4::zeros(x.raw_dim());
    for model in models {
        let fw = model.network.forward(x, None)?;
        let logits = fw.logits.as_ref().expect("full pass");
        let logp = ops::log_softmax(&logits.view());
        let mut dlogits = logp.mapv(f64::exp);
        for i in 0..n {
            loss[i] -= logp[[i, proxy]] / m;
            dlogits[[i, proxy]] -= 1.0;
        }
        dlogits /= m;
        grad += &model.network.backward(&fw.tape, Some(&dlogits), &[], None);
    }
    Ok((loss, grad))
}

/// One FDA ensemble member bound to a clean batch: probes and clean features
/// are resolved once so every iteration reuses them.
pub struct FdaTarget<'a> {
    model: &'a ModelHandle,
    probes: Vec<&'a Probe>,
    layers: Vec<LayerId>,
    sites: Vec<usize>,
    deepest: LayerId,
    clean_features: Vec<Array4<f64>>,
    clean_norms: Vec<Array1<f64>>,
    eta: f64,
}

fn per_example_norms(f: &Array4<f64>) -> Array1<f64> {
    f.axis_iter(Axis(0)).map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

impl<'a> FdaTarget<'a> {
    pub fn new(
        model: &'a ModelHandle,
        aux: &'a AuxModelSet,
        clean: &ArrayView4<f64>,
        proxy: usize,
        layers: &[LayerId],
        eta: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("FDA needs at least one layer".into()));
        }
        let probes = layers.iter().map(|l| aux.get(proxy, l)).collect::<Result<Vec<_>>>()?;
        let sites = layers.iter().map(|l| model.network.site_index(l)).collect::<Result<Vec<_>>>()?;
        let deepest = layers[sites.iter().enumerate().max_by_key(|(_, s)| **s).expect("non-empty").0].clone();
        let fw = model.network.forward(clean, Some(&deepest))?;
        let clean_features = layers
            .iter()
            .map(|l| model.network.feature(&fw.tape, l).cloned())
            .collect::<Result<Vec<_>>>()?;
        let clean_norms = clean_features.iter().map(per_example_norms).collect();
        Ok(Self { model, probes, layers: layers.to_vec(), sites, deepest, clean_features, clean_norms, eta })
    }

    fn evaluate(&self, x: &ArrayView4<f64>, want_grad: bool) -> Result<(Array1<f64>, Option<Array4<f64>>)> {
        if x.dim().0 != self.clean_features[0].dim().0 {
            return Err(Error::Shape("FDA input batch differs from the bound clean batch".into()));
        }
        let n = x.dim().0;
        let inv_l = 1.0 / self.layers.len() as f64;
        let fw = self.model.network.forward(x, Some(&self.deepest))?;
        let mut loss = Array1::zeros(n);
        let mut site_grads = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let f = self.model.network.feature(&fw.tape, layer)?;
            let up = Array1::from_elem(n, inv_l);
            let (p, mut g) = self.probes[k].prob_and_grad(&f.view(), &up.view());
            let diff = f - &self.clean_features[k];
            let dn = per_example_norms(&diff);
            for i in 0..n {
                let den = self.clean_norms[k][i].max(FDA_NORM_FLOOR);
                loss[i] += inv_l * (p[i] + self.eta * dn[i] / den);
                if want_grad && dn[i] > 0.0 && self.eta > 0.0 {
                    let scale = inv_l * self.eta / (den * dn[i]);
                    Zip::from(g.index_axis_mut(Axis(0), i))
                        .and(diff.index_axis(Axis(0), i))
                        .for_each(|gv, &dv| *gv += scale * dv);
                }
            }
            site_grads.push((self.sites[k], g));
        }
        let grad = want_grad.then(|| self.model.network.backward(&fw.tape, None, &site_grads, None));
        Ok((loss, grad))
    }
}

/// Per-example FDA objective of one member and its gradient w.r.t. `x`.
pub fn fda_loss_and_grad(target: &FdaTarget<'_>, x: &ArrayView4<f64>) -> Result<(Array1<f64>, Array4<f64>)> {
    let (l, g) = target.evaluate(x, true)?;
    Ok((l, g.expect("gradient requested")))
}

/// Per-example FDA objective at `clean + delta`:
/// the layer mean of the proxy probe probability plus `eta` times the
/// relative feature displacement.
pub fn fda_loss(
    whitebox: &ModelHandle,
    aux: &AuxModelSet,
    clean: &ArrayView4<f64>,
    delta: &ArrayView4<f64>,
    proxy: usize,
    layers: &[LayerId],
    eta: f64,
) -> Result<Array1<f64>> {
    if clean.dim() != delta.dim() {
        return Err(Error::Shape(format!("clean {:?} vs delta {:?}", clean.dim(), delta.dim())));
    }
    let target = FdaTarget::new(whitebox, aux, clean, proxy, layers, eta)?;
    let x = clean + delta;
    Ok(target.evaluate(&x.view(), false)?.0)
}
