use crate::error::{shape_err, Result};
use crate::loss::{
    evaluate, multiscale_loss_var, valid_mask, BerHuConfig, DepthRange, MetricsInput,
    MetricsReport, MultiScaleLossConfig,
};
use crate::net::config::NetworkConfig;
use crate::net::model::{
    init_parameters, pooled_targets, sphere_fusion_forward, NetworkInput, NetworkResources,
};
use crate::tensor::{AdamState, BoundParams, Parameters, Tape, Tensor, Var};

/// One panorama with ground truth on every output level.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: NetworkInput,
    /// Per-face targets, ascending in mr.
    pub targets: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    /// Equirectangular ground truth `[H, W]`, for evaluation.
    pub distance: Tensor,
    pub range: DepthRange,
}

impl TrainingSample {
    /// `rgb` is `[H, W, 3]` in `[0, 1]`; `distance` is `[H, W]` with values
    /// outside `range` treated as invalid.
    ///
    /// The finest target is the bilinear E2S of the distance map; a face is
    /// valid only if every pixel it samples is. Coarser targets are max
    /// pooled.
    pub fn new(
        rgb: &Tensor,
        distance: &Tensor,
        resources: &NetworkResources,
        range: DepthRange,
    ) -> Result<Self> {
        let cfg = resources.config();
        if distance.shape() != [cfg.image_h, cfg.image_w] {
            return shape_err(format!(
                "distance map {:?}, network expects [{}, {}]",
                distance.shape(),
                cfg.image_h,
                cfg.image_w
            ));
        }
        let input = NetworkInput::from_rgb(rgb, resources)?;
        let table = resources.output_table();
        let d = distance.data();
        let finest: Vec<f64> = table
            .e2s()
            .iter()
            .map(|s| {
                let ok = s
                    .pixels
                    .iter()
                    .zip(s.weights())
                    .all(|(&p, w)| w == 0.0 || range.contains(d[p]));
                if ok {
                    s.interpolate(s.pixels.map(|p| d[p]))
                } else {
                    0.0
                }
            })
            .collect();
        let finest = Tensor::new([finest.len(), 1], finest)?;
        let targets: Vec<Vec<f64>> = pooled_targets(&finest, cfg.mr_out(), cfg.scales)?
            .into_iter()
            .map(Tensor::into_data)
            .collect();
        let masks = targets.iter().map(|t| valid_mask(t, range).0).collect();
        Ok(Self {
            input,
            targets,
            masks,
            distance: distance.clone(),
            range,
        })
    }
}

/// Weighted multi-scale BerHu loss of one forward pass.
pub fn network_loss<'t>(
    sample: &TrainingSample,
    params: &BoundParams<'t>,
    resources: &NetworkResources,
    tape: &'t Tape,
    berhu: BerHuConfig,
) -> Result<Var<'t>> {
    let cfg = resources.config();
    let outputs = sphere_fusion_forward(&sample.input, params, resources, tape)?;
    let preds: Vec<Var<'t>> = outputs.iter().map(|o| o.values()).collect();
    let weights = MultiScaleLossConfig::new(cfg.loss_weights.clone())?;
    multiscale_loss_var(&preds, &sample.targets, &sample.masks, &weights, berhu)
}

/// Parameters, optimiser state and resources of one network.
#[derive(Debug)]
pub struct Trainer {
    resources: NetworkResources,
    params: Parameters,
    optimizer: AdamState,
    berhu: BerHuConfig,
}

impl Trainer {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        let resources = NetworkResources::build(config)?;
        let params = init_parameters(config)?;
        Ok(Self::from_parts(resources, params))
    }

    pub fn from_parts(resources: NetworkResources, params: Parameters) -> Self {
        let optimizer = AdamState::new(resources.config().lr, &params);
        Self {
            resources,
            params,
            optimizer,
            berhu: BerHuConfig::default(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        self.resources.config()
    }

    pub fn resources(&self) -> &NetworkResources {
        &self.resources
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn optimizer_mut(&mut self) -> &mut AdamState {
        &mut self.optimizer
    }

    pub fn into_params(self) -> Parameters {
        self.params
    }

    /// Loss without touching the parameters.
    pub fn loss(&self, sample: &TrainingSample) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        Ok(network_loss(sample, &bound, &self.resources, &tape, self.berhu)?
            .value()
            .item())
    }

    /// Forward, loss, backward and one Adam update. Returns the loss before
    /// the update.
    pub fn train_step(&mut self, sample: &TrainingSample) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, true);
        let loss = network_loss(sample, &bound, &self.resources, &tape, self.berhu)?;
        let grads = tape.backward(loss)?;
        let grads = bound.gradients(&grads);
        self.optimizer.step(&mut self.params, &grads)?;
        Ok(loss.value().item())
    }

    /// Per-scale `[F, 1]` distances, ascending in mr.
    pub fn predict(&self, input: &NetworkInput) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        Ok(sphere_fusion_forward(input, &bound, &self.resources, &tape)?
            .iter()
            .map(|o| (*o.values().value()).clone())
            .collect())
    }

    /// Finest prediction resampled to the input grid, `[H, W]`.
    pub fn predict_equirect(&self, input: &NetworkInput) -> Result<Tensor> {
        let finest = self.predict(input)?.pop().expect("at least one scale");
        let cfg = self.config();
        self.resources
            .output_table()
            .s2e_resample(&finest)?
            .reshape([cfg.image_h, cfg.image_w])
    }

    /// Metrics of the equirectangular prediction against the sample's map.
    pub fn evaluate(&self, sample: &TrainingSample) -> Result<MetricsReport> {
        let pred = self.predict_equirect(&sample.input)?;
        evaluate(MetricsInput {
            gt: sample.distance.data(),
            pr: pred.data(),
            range: sample.range,
        })
    }
}
