use dfr_core::datagen::{generate_dataset, DatasetSpec, GroupId, Image, Mask, Sample};
use dfr_core::interpret::{
    cam, classify_neurons, feature_cam, neuron_map, region_score, score_maps, upsample_bilinear, Heatmap, Resolution,
    Taxonomy, TaxonomyThresholds,
};
use dfr_core::nn::{forward, spatial_mean, Encoder, Head, TrainedModel};
use dfr_core::seed;
use proptest::prelude::*;
use rand::Rng;

fn random_model(seed: u64, image_size: usize, widths: &[usize]) -> TrainedModel {
    let mut rng = seed::rng(seed, &[7]);
    let mut encoder = Encoder::init(image_size, 3, widths, &mut rng).unwrap();
    // Positive biases keep most channels active.
    for st in &mut encoder.stages {
        for b in &mut st.bias {
            *b = rng.random_range(0.0..0.2);
        }
    }
    let head = Head {
        weights: (0..encoder.output_channels()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        bias: 0.1,
    };
    TrainedModel::new(encoder, head).unwrap()
}

fn probe(seed: u64) -> Vec<Sample> {
    generate_dataset(&DatasetSpec {
        image_size: 16,
        n_train_per_class: 0,
        n_val_per_class: 0,
        n_test_per_class: 4,
        patch_size: 3,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
    .test
}

#[test]
fn cam_is_weighted_sum_of_neuron_maps() {
    let model = random_model(1, 16, &[4, 8]);
    for s in probe(2) {
        let c = cam(&model, &s.image).unwrap();
        let mut sum = vec![0.0; c.values.len()];
        for (k, w) in model.head.weights.iter().enumerate() {
            let m = neuron_map(&model, &s.image, k).unwrap();
            assert!(m.values.iter().all(|&v| v >= 0.0));
            for (acc, v) in sum.iter_mut().zip(&m.values) {
                *acc += w * v;
            }
        }
        for (a, b) in c.values.iter().zip(&sum) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn unit_head_cam_is_first_channel() {
    let mut model = random_model(3, 16, &[4, 5]);
    model.head.weights = vec![0.0; 5];
    model.head.weights[0] = 1.0;
    let s = &probe(4)[0];
    assert_eq!(cam(&model, &s.image).unwrap(), neuron_map(&model, &s.image, 0).unwrap());
}

#[test]
fn gap_identity_holds_for_trained_shapes() {
    let model = random_model(5, 16, &[4, 6, 8]);
    for s in probe(6) {
        let out = forward(&model.encoder, &s.image).unwrap();
        for k in 0..out.maps.channels {
            assert_eq!(spatial_mean(out.maps.channel(k)), out.features[k]);
        }
        let fm = feature_cam(&model.head, &out.maps).unwrap();
        assert_eq!(fm.resolution, Resolution::FeatureSpace);
    }
}

/// Constructed probe: core mask on the left half, patch mask in the top-right corner.
fn constructed_probe(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let patch = i % 2 == 0;
            let group = GroupId::from_index(if patch { 1 } else { 0 }).unwrap();
            let mut core = Mask::empty(8, 8);
            let mut spurious = Mask::empty(8, 8);
            for y in 0..8 {
                for x in 0..8 {
                    core.data[y * 8 + x] = x < 3 && (2..6).contains(&y);
                    spurious.data[y * 8 + x] = patch && x >= 6 && y < 2;
                }
            }
            Sample {
                image: Image::zeros(8, 8, 3),
                label: group.label(),
                group,
                core_mask: core,
                spurious_mask: spurious,
            }
        })
        .collect()
}

fn map_on(mask: &Mask) -> Heatmap {
    let values = mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Heatmap::new(mask.height, mask.width, values, Resolution::InputSpace).unwrap()
}

#[test]
fn constructed_neurons_classify_as_specified() {
    let probe = constructed_probe(6);
    let t = TaxonomyThresholds::default();

    // Silent on patch-free probes, where the patch mask is empty.
    let spurious_maps: Vec<Heatmap> = probe.iter().map(|s| map_on(&s.spurious_mask)).collect();
    let r = score_maps(spurious_maps.iter().zip(&probe), &t).unwrap();
    assert_eq!(r.taxonomy, Taxonomy::SpuriousOnly, "{r:?}");

    let core_maps: Vec<Heatmap> = probe.iter().map(|s| map_on(&s.core_mask)).collect();
    let r = score_maps(core_maps.iter().zip(&probe), &t).unwrap();
    assert_eq!(r.taxonomy, Taxonomy::CoreOnly, "{r:?}");
    assert_eq!((r.core_score, r.spurious_score), (1.0, 0.0));

    // Core when the patch is absent, patch when it is present.
    let switching: Vec<Heatmap> = probe
        .iter()
        .map(|s| {
            if s.group.spurious() {
                map_on(&s.spurious_mask)
            } else {
                map_on(&s.core_mask)
            }
        })
        .collect();
    let r = score_maps(switching.iter().zip(&probe), &t).unwrap();
    assert_eq!(r.taxonomy, Taxonomy::Mixed, "{r:?}");
    assert_eq!((r.core_score, r.spurious_score), (0.5, 1.0));

    let silent: Vec<Heatmap> = probe.iter().map(|_| map_on(&Mask::empty(8, 8))).collect();
    let r = score_maps(silent.iter().zip(&probe), &t).unwrap();
    assert_eq!(r.taxonomy, Taxonomy::Inactive);
}

#[test]
fn probe_without_patches_is_rejected() {
    let probe: Vec<Sample> = constructed_probe(6).into_iter().filter(|s| !s.group.spurious()).collect();
    let maps: Vec<Heatmap> = probe.iter().map(|s| map_on(&s.core_mask)).collect();
    let t = TaxonomyThresholds::default();
    assert!(matches!(
        score_maps(maps.iter().zip(&probe), &t),
        Err(dfr_core::Error::Probe(_))
    ));
    let model = random_model(1, 8, &[2]);
    let head = model.head.clone();
    assert!(matches!(
        classify_neurons(&model, &head, &probe, &t),
        Err(dfr_core::Error::Probe(_))
    ));
}

#[test]
fn taxonomy_is_deterministic() {
    let model = random_model(9, 16, &[4, 6]);
    let probe = probe(10);
    let t = TaxonomyThresholds::default();
    let a = classify_neurons(&model, &model.head, &probe, &t).unwrap();
    let b = classify_neurons(&model, &model.head, &probe, &t).unwrap();
    assert_eq!(a, b);
    let single = dfr_core::interpret::classify_neuron(&model, &model.head, &probe, 3, &t).unwrap();
    assert_eq!(single, a[3]);
}

fn heatmap_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-5.0f64..5.0, h * w)))
}

proptest! {
    #[test]
    fn bilinear_keeps_corners_exactly((h, w, v) in heatmap_strategy(), dy in 0usize..20, dx in 0usize..20) {
        let m = Heatmap::new(h, w, v, Resolution::FeatureSpace).unwrap();
        let (oh, ow) = (h + dy, w + dx);
        let up = upsample_bilinear(&m, oh, ow).unwrap();
        prop_assert_eq!(up.at(0, 0), m.at(0, 0));
        prop_assert_eq!(up.at(0, ow - 1), m.at(0, w - 1));
        prop_assert_eq!(up.at(oh - 1, 0), m.at(h - 1, 0));
        prop_assert_eq!(up.at(oh - 1, ow - 1), m.at(h - 1, w - 1));
    }

    #[test]
    fn region_score_matches_direct_sum((h, w, v) in heatmap_strategy(), bits in prop::collection::vec(any::<bool>(), 25)) {
        let m = Heatmap::new(h, w, v.iter().map(|x| x.abs()).collect(), Resolution::InputSpace).unwrap();
        let mask = Mask { height: h, width: w, data: bits[..h * w].to_vec() };
        let r = region_score(&m, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.score));
        let mut inside = 0.0;
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                total += m.at(y, x);
                if mask.data[y * w + x] {
                    inside += m.at(y, x);
                }
            }
        }
        if total > 0.0 {
            prop_assert!((r.score - inside / total).abs() <= 1e-12);
        } else {
            prop_assert!(r.empty);
        }
    }

    #[test]
    fn signed_maps_score_within_unit_interval((h, w, v) in heatmap_strategy(), bits in prop::collection::vec(any::<bool>(), 25)) {
        let m = Heatmap::new(h, w, v, Resolution::InputSpace).unwrap();
        let mask = Mask { height: h, width: w, data: bits[..h * w].to_vec() };
        let r = region_score(&m, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.score));
    }
}
