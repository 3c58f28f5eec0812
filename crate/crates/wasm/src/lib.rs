//! WebAssembly bindings for the static demo page in `www/`.

mod scene;

pub use scene::{Comparison, Scene, FINE};

use wasm_bindgen::prelude::*;

fn js(e: mchom::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(medium: &str, coarse: usize, contrast: f64) -> Result<Demo, JsError> {
        Scene::new(medium, coarse, contrast).map(|scene| Demo { scene }).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn fine(&self) -> usize {
        FINE
    }

    #[wasm_bindgen(getter, js_name = blockNodes)]
    pub fn block_nodes(&self) -> usize {
        self.scene.block_nodes()
    }

    #[wasm_bindgen(js_name = mediumImage)]
    pub fn medium_image(&self) -> Vec<f64> {
        self.scene.medium_image()
    }

    #[wasm_bindgen(js_name = cellBasis)]
    pub fn cell_basis(&self, block: usize, continuum: usize, derivative: usize) -> Result<Vec<f64>, JsError> {
        self.scene.cell_basis(block, continuum, derivative).map_err(js)
    }

    /// Returns `[e_1, e_2, fine block averages..., coarse block averages...]`.
    pub fn simulate(&self, alpha1: f64, alpha2: f64, final_time: f64) -> Result<Vec<f64>, JsError> {
        let alpha = if alpha1 == alpha2 { vec![alpha1] } else { vec![alpha1, alpha2] };
        let c = self.scene.simulate(&alpha, final_time).map_err(js)?;
        Ok(c.errors.into_iter().chain(c.fine_blocks).chain(c.coarse_blocks).collect())
    }
}
