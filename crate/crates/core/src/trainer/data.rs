use crate::datagen::{apply_augment, AugmentParams, DensityProfile, Sample};
use crate::error::Result;
use crate::groundtruth::{adaptive_density_map, dot_target_map, gaussian_density_map, AdaptiveKernel};
use crate::tensorgrad::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GtKernel {
    Fixed(f64),
    Adaptive(AdaptiveKernel),
}

impl GtKernel {
    pub fn resolve(sigma: Option<f64>, adaptive: bool, profile: DensityProfile) -> Self {
        if adaptive {
            GtKernel::Adaptive(AdaptiveKernel {
                fallback_sigma: sigma.unwrap_or(profile.sigma()),
                ..AdaptiveKernel::default()
            })
        } else {
            GtKernel::Fixed(sigma.unwrap_or(profile.sigma()))
        }
    }
}

/// A sample with its targets, all `[1,H,W]`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Tensor,
    pub density: Tensor,
    pub dots: Tensor,
    pub count: f64,
}

impl Prepared {
    pub fn new(sample: &Sample, kernel: GtKernel) -> Result<Self> {
        let ann = &sample.annotation;
        let dm = match kernel {
            GtKernel::Fixed(s) => gaussian_density_map(ann, s)?,
            GtKernel::Adaptive(k) => adaptive_density_map(ann, &k)?,
        };
        let (h, w) = (ann.height, ann.width);
        Ok(Prepared {
            image: sample.image.clone(),
            density: dm.values.reshape(&[1, h, w])?,
            dots: dot_target_map(ann).values.reshape(&[1, h, w])?,
            count: ann.count() as f64,
        })
    }

    pub fn augmented(sample: &Sample, crop: usize, params: &AugmentParams, kernel: GtKernel) -> Result<Self> {
        Prepared::new(&apply_augment(sample, crop, params)?, kernel)
    }
}

/// Stack `[1,H,W]` items into `[N,1,H,W]`.
pub(crate) fn batch_of<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let v: Vec<&Tensor> = items.collect();
    Tensor::stack(&v)
}
