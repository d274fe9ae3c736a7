// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-browser attnscope: run a prompt through a built-in model, then look
//! at input saliency for one output token or at per-head importance.
//!
//! Build with `wasm-pack build --target web --out-dir www/pkg`.

mod session;

pub use session::{DemoError, Generated, Heatmap, Saliency, Session};

use wasm_bindgen::prelude::*;

fn js<T: serde::Serialize>(value: &T) -> Result<JsValue, JsError> {
    serde_wasm_bindgen::to_value(value).map_err(|e| JsError::new(&e.to_string()))
}

fn err(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn builtin_models() -> Vec<String> {
    attnscope_core::model::BUILTIN_MODELS
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[wasm_bindgen]
pub struct Workbench {
    session: Session,
}

#[wasm_bindgen]
impl Workbench {
    #[wasm_bindgen(constructor)]
    pub fn new(model: &str) -> Result<Workbench, JsError> {
        Ok(Workbench {
            session: Session::new(model).map_err(err)?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn model(&self) -> String {
        self.session.model_id().to_string()
    }

    /// Tokenizes `text` and decodes greedily.
    pub fn run(&mut self, text: &str, max_new_tokens: usize) -> Result<JsValue, JsError> {
        js(&self.session.run(text, max_new_tokens).map_err(err)?)
    }

    pub fn attribution(&self, step: usize, m_steps: usize, baseline: &str) -> Result<JsValue, JsError> {
        js(&self.session.attribution(step, m_steps, baseline).map_err(err)?)
    }

    pub fn head_importance(&self, m_steps: usize, reduction: &str) -> Result<JsValue, JsError> {
        js(&self.session.head_importance(m_steps, reduction).map_err(err)?)
    }
}
