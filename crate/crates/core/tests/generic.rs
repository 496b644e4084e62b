use sparseconv::dataset::{fixture_f5, fixture_k3, generate, random_filter};
use sparseconv::ecr::{ecr_convert, ecr_spmv_conv};
use sparseconv::pecr::{pecr_conv_pool, pecr_convert};
use sparseconv::pipeline::{forward, load_network, toy_network, Method, NetworkDoc};
use sparseconv::tensor::{dense_conv, pool, relu};
use sparseconv::{
    ConvConfig, EcrMapF64, ExecConfig, FeatureMapF64, FilterF64, NetworkSpecF64, PoolConfig,
};

#[test]
fn f64_paths_agree() {
    let map: FeatureMapF64 = generate(17, 17, 3, 0.6, 21).unwrap().cast();
    let filter: FilterF64 = random_filter(3, 3, 3, 22).unwrap().cast();
    let dense = dense_conv(&map, &filter, ConvConfig::default(), None).unwrap();
    let ecr: EcrMapF64 = ecr_convert(&map, &filter, ConvConfig::default()).unwrap();
    assert!(
        ecr_spmv_conv(&ecr, None)
            .unwrap()
            .max_abs_diff(&dense)
            .unwrap()
            < 1e-12
    );

    let pool_cfg = PoolConfig::max(3, 3, 3).unwrap();
    let fused = pecr_conv_pool(
        &pecr_convert(&map, &filter, ConvConfig::default(), pool_cfg).unwrap(),
        None,
    )
    .unwrap();
    let separate = pool(&relu(&dense), pool_cfg).unwrap();
    assert_eq!(fused, separate);
}

#[test]
fn fixture_in_both_precisions() {
    let f32_out = dense_conv(
        &fixture_f5::<f32>(),
        &fixture_k3(),
        ConvConfig::default(),
        None,
    )
    .unwrap();
    let f64_out = dense_conv(
        &fixture_f5::<f64>(),
        &fixture_k3(),
        ConvConfig::default(),
        None,
    )
    .unwrap();
    assert_eq!(f32_out.cast::<f64>(), f64_out);
    assert_eq!(
        f64_out.values(),
        &[51.0, 49.0, 61.0, 83.0, 70.0, 75.0, 93.0, 106.0, 103.0]
    );
}

#[test]
fn network_document_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_network(22, 3).unwrap();
    let path = dir.path().join("toy.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&NetworkDoc::from_spec(&net)).unwrap(),
    )
    .unwrap();

    let reloaded = load_network::<f32>(&path).unwrap();
    let wide: NetworkSpecF64 = load_network(&path).unwrap();
    let input = generate(22, 22, 1, 0.5, 9).unwrap();
    let exec = ExecConfig::default();
    let a = forward(&net, &input, Method::Ecr, &exec).unwrap();
    let b = forward(&reloaded, &input, Method::Ecr, &exec).unwrap();
    assert!(a.output.bitwise_eq(&b.output));
    assert_eq!(a.ops, b.ops);

    let c = forward(&wide, &input.cast(), Method::Pecr, &exec).unwrap();
    assert!(c.output.max_abs_diff(&a.output.cast()).unwrap() < 1e-5);
}
