use tac_npml::distribution::{make_grid, moments, GridBounds};
use tac_npml::episode::{parse_episode_csv, resample_uniform, write_episode_csv, ColumnMap};
use tac_npml::likelihood::{log_node_likelihoods, NoiseModel};
use tac_npml::mle::{estimate, Algorithm, EstimatorConfig};
use tac_npml::synthetic::{generate_episode, input_library, TruthSpec};

/// Episodes simulated at a single grid node put (almost) all fitted mass on
/// that node when the estimation mesh matches the data mesh.
#[test]
fn point_truth_is_recovered_on_its_node() {
    let spec = TruthSpec {
        n_truth_mesh: 32,
        ..TruthSpec::default()
    };
    let grid = make_grid(GridBounds::unit(), 6, 6).unwrap();
    let node = grid.index(2, 3);
    let q = grid.nodes()[node];
    let library = input_library(&spec);
    let episodes: Vec<_> = (0..4)
        .map(|i| generate_episode(&format!("e{i}"), &library[i], &q, &spec, 100 + i as u64).unwrap())
        .collect();
    let l = log_node_likelihoods(&episodes, &grid, 32, &NoiseModel::gaussian(spec.sigma2).unwrap()).unwrap();
    for algorithm in [Algorithm::Em, Algorithm::ProjectedGradient] {
        let cfg = EstimatorConfig {
            algorithm,
            ..EstimatorConfig::default()
        };
        let fit = estimate(&l, &cfg, None).unwrap();
        assert!(fit.weights().as_slice()[node] > 0.999, "{algorithm:?}: {}", fit.weights().as_slice()[node]);
        let mom = moments(&fit.distribution);
        assert!((mom.mean[0] - q.q1).abs() < 1e-3 && (mom.mean[1] - q.q2).abs() < 1e-3);
    }
}

/// Writing an episode and reading it back at the same interval is lossless.
#[test]
fn episode_file_round_trip_feeds_the_likelihood() {
    let spec = TruthSpec::default();
    let library = input_library(&spec);
    let q = tac_npml::model::ParameterVector::new(0.3, 0.6).unwrap();
    let e = generate_episode("x", &library[2], &q, &spec, 1).unwrap();
    let mut buf = Vec::new();
    write_episode_csv(&e.to_raw(), &mut buf).unwrap();
    let raw = parse_episode_csv("x", buf.as_slice(), &ColumnMap::default()).unwrap();
    let back = resample_uniform(&raw, spec.tau_hours).unwrap();
    assert_eq!(back.brac, e.brac);
    assert_eq!(back.tac, e.tac);

    let grid = make_grid(GridBounds::unit(), 3, 3).unwrap();
    let noise = NoiseModel::gaussian(spec.sigma2).unwrap();
    let a = log_node_likelihoods(&[e], &grid, 16, &noise).unwrap();
    let b = log_node_likelihoods(&[back], &grid, 16, &noise).unwrap();
    assert_eq!(a.values(), b.values());
}
