//! Dataset to trained model glue shared by the CLI and the benchmarks.

use crate::baselines::cnn::{cnn_train, CnnConfig, CnnModel};
use crate::baselines::gbt::{gbt_train, GbtConfig, GbtModel};
use crate::baselines::raster::rasterize;
use crate::data::{select_features, split_dataset, Dataset, FeatureSetId, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::gnn::{self, GnnConfig, TrainedModel};
use crate::graph::{build_graph, CircuitGraph};
use crate::preprocess::{fit_transform, transform, ScalerParams};

/// A graph whose features were scaled with statistics of its training rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub set_id: FeatureSetId,
    pub graph: CircuitGraph,
    pub split: Split,
    pub scaler: ScalerParams,
}

pub fn prepare(ds: &Dataset, set_id: FeatureSetId, spec: &SplitSpec, threshold_um: f64) -> Result<Prepared> {
    let split = split_dataset(ds, spec)?;
    let fm = select_features(ds, set_id)?;
    let (scaled, scaler) = fit_transform(&fm.values, set_id.columns(), &split.train)?;
    let mut graph = build_graph(ds, scaled, threshold_um)?;
    graph.scaler = Some(scaler.clone());
    Ok(Prepared {
        set_id,
        graph,
        split,
        scaler,
    })
}

/// Graph for inference, scaled with previously fitted parameters.
pub fn inference_graph(ds: &Dataset, set_id: FeatureSetId, scaler: &ScalerParams, threshold_um: f64) -> Result<CircuitGraph> {
    if !scaler.matches(set_id) {
        return Err(Error::validation(format!(
            "scaler columns {:?} do not match feature set {set_id}",
            scaler.columns
        )));
    }
    let fm = select_features(ds, set_id)?;
    let mut graph = build_graph(ds, transform(&fm.values, scaler)?, threshold_um)?;
    graph.scaler = Some(scaler.clone());
    Ok(graph)
}

pub fn fit_gnn(
    ds: &Dataset,
    set_id: FeatureSetId,
    spec: &SplitSpec,
    threshold_um: f64,
    cfg: &GnnConfig,
) -> Result<(TrainedModel, Prepared)> {
    let prep = prepare(ds, set_id, spec, threshold_um)?;
    let mut model = gnn::train(&prep.graph, &prep.split, cfg)?;
    model.feature_set = Some(set_id);
    Ok((model, prep))
}

/// Predictions (mV) for every net of `ds`, in dataset order.
pub fn predict_gnn(model: &TrainedModel, ds: &Dataset) -> Result<Vec<f64>> {
    let set_id = model
        .feature_set
        .ok_or_else(|| Error::validation("model does not record its feature set"))?;
    let scaler = model
        .scaler
        .as_ref()
        .ok_or_else(|| Error::validation("model does not carry its feature scaler"))?;
    let graph = inference_graph(ds, set_id, scaler, model.threshold_um)?;
    gnn::predict(model, &graph)
}

/// Boosted trees on the unscaled feature columns of `set_id`.
pub fn fit_gbt(ds: &Dataset, set_id: FeatureSetId, spec: &SplitSpec, cfg: &GbtConfig) -> Result<(GbtModel, Split)> {
    let split = split_dataset(ds, spec)?;
    let fm = select_features(ds, set_id)?;
    let mut model = gbt_train(&fm.values, &ds.labels()?, &split, cfg)?;
    model.feature_set = Some(set_id);
    Ok((model, split))
}

pub fn predict_gbt(model: &GbtModel, ds: &Dataset) -> Result<Vec<f64>> {
    let set_id = model
        .feature_set
        .ok_or_else(|| Error::validation("model does not record its feature set"))?;
    model.predict(&select_features(ds, set_id)?.values)
}

/// CNN on the tile map of `ds`; only training nets label the training map.
pub fn fit_cnn(
    ds: &Dataset,
    set_id: FeatureSetId,
    spec: &SplitSpec,
    tile_um: f64,
    cfg: &CnnConfig,
) -> Result<(CnnModel, Split)> {
    let split = split_dataset(ds, spec)?;
    let mut train = rasterize(ds, tile_um, set_id)?;
    let mut val = train.clone();
    train.relabel(ds, &split.train)?;
    val.relabel(ds, &split.val)?;
    let val = (!split.val.is_empty()).then_some(&val);
    Ok((cnn_train(&train, val, cfg)?, split))
}

pub fn predict_cnn(model: &CnnModel, ds: &Dataset) -> Result<Vec<f64>> {
    let grid = rasterize(ds, model.tile_um, model.set_id)?;
    model.predict_per_net(&grid, ds)
}
