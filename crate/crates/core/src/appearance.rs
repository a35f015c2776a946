//! Per-identity appearance codes, optimized auto-decoder style alongside
//! the renderer. Swapping codes between identities transfers appearance
//! without moving geometry.

use crate::error::{Error, Result};
use crate::model::Binder;
use occa_autodiff::{Graph, ParamStore, Tensor};

/// Identity id -> learnable code vector (stored as `app.code.<id>`).
#[derive(Clone, Debug)]
pub struct CodeTable {
    pub ids: Vec<String>,
    pub dim: usize,
}

impl CodeTable {
    /// Register zero-initialized codes for each identity.
    pub fn register(store: &mut ParamStore, ids: &[String], dim: usize) -> CodeTable {
        for id in ids {
            store.register(&format!("app.code.{}", id), &[1, dim], vec![0.0; dim]);
        }
        CodeTable { ids: ids.to_vec(), dim }
    }

    /// Rebuild the table from checkpoint parameter names.
    pub fn from_store(store: &ParamStore, dim: usize) -> CodeTable {
        let ids = store
            .iter()
            .filter_map(|p| p.name.strip_prefix("app.code.").map(str::to_string))
            .collect();
        CodeTable { ids, dim }
    }

    pub fn param_name(&self, id: &str) -> Result<String> {
        if self.ids.iter().any(|x| x == id) {
            Ok(format!("app.code.{}", id))
        } else {
            Err(Error::UnknownIdentity { id: id.to_string() })
        }
    }

    /// Live code values for a registered identity.
    pub fn get_code<'s>(&self, store: &'s ParamStore, id: &str) -> Result<&'s [f32]> {
        let name = self.param_name(id)?;
        Ok(store.get(&name).value.as_slice())
    }

    /// Bind (train) or read (frozen) a code as a [1, dim] tensor.
    pub fn code_tensor(&self, g: &mut Graph, binder: &mut Binder, id: &str) -> Result<Tensor> {
        let name = self.param_name(id)?;
        Ok(binder.get(g, &name))
    }

    /// weight · mean over codes of the squared L2 norm.
    pub fn regularizer(&self, g: &mut Graph, binder: &mut Binder, weight: f32) -> Tensor {
        let mut acc: Option<Tensor> = None;
        for id in &self.ids {
            let code = binder.get(g, &format!("app.code.{}", id));
            let sq = g.powi(&code, 2);
            let norm2 = g.sum(&sq);
            acc = Some(match acc {
                Some(prev) => g.add(&prev, &norm2),
                None => norm2,
            });
        }
        let total = acc.expect("code table is empty");
        g.scale(&total, weight / self.ids.len() as f32)
    }
}
