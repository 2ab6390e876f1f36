use drape_forge::body::build_procedural_body;
use drape_forge::checkpoint;
use drape_forge::fit::{distance_matrix, fit_factor_analysis, FitModel, FitPair, PairRegistry};
use drape_forge::gnn::ParamStore;
use drape_forge::mesh::{load_obj, nearest_vertex_map, parse_obj, save_obj, Vec3};
use drape_forge::oracle::{generate_garment, GarmentFamily};
use drape_forge::tensor::Tensor;
use drape_forge::Error;

#[test]
fn obj_files_round_trip() {
    let garment = generate_garment(&GarmentFamily::default(), 0.4, 0.18, 20, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.obj");
    save_obj(&garment, &path).unwrap();
    let back = load_obj(&path).unwrap();
    assert_eq!(back.faces, garment.faces);
    for (a, b) in back.vertices.iter().zip(&garment.vertices) {
        assert!((a - b).norm() < 1e-6);
    }
}

#[test]
fn obj_reader_handles_quads_and_rejects_bad_indices() {
    let quad = "# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
    let mesh = parse_obj(quad, "quad.obj".as_ref()).unwrap();
    assert_eq!(mesh.vertex_count(), 4);
    assert_eq!(mesh.faces.len(), 2);

    let bad = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n";
    assert!(matches!(parse_obj(bad, "bad.obj".as_ref()), Err(Error::Validation(_))));
    let garbled = "v 0 0 zero\n";
    assert!(matches!(parse_obj(garbled, "garbled.obj".as_ref()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn checkpoint_layout_is_little_endian_records() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.25, 0.0, -1e-300]).unwrap()).unwrap();
    store.insert("block.bias", Tensor::from_vec(1, 2, vec![7.0, f64::MIN_POSITIVE]).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dfrg");
    checkpoint::save(&store, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    assert_eq!(&bytes[..4], b"DFRG");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), checkpoint::VERSION);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(&bytes[12..13], b"w");
    assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[25..33].try_into().unwrap()), 3);
    assert_eq!(f64::from_le_bytes(bytes[33..41].try_into().unwrap()), 1.0);
    let first_record = 4 + 1 + 4 + 16 + 6 * 8;
    let second_record = 4 + 10 + 4 + 16 + 2 * 8;
    assert_eq!(bytes.len(), 8 + first_record + second_record);

    assert_eq!(checkpoint::load(&path).unwrap(), store);

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checkpoint(_))));
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&path, &wrong).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn body_model_json_round_trips_and_skins_identically() {
    let model = build_procedural_body(16, 6, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("body.json");
    model.save_json(&path).unwrap();
    let back = drape_forge::body::BodyModel::load_json(&path).unwrap();
    assert_eq!(back, model);

    let beta: Vec<f64> = (0..model.shape_count()).map(|k| 0.1 * k as f64 - 0.3).collect();
    let theta: Vec<f64> = (0..model.pose_size()).map(|k| 0.05 * ((k % 5) as f64 - 2.0)).collect();
    let t = Vec3::new(0.2, -0.1, 0.4);
    assert_eq!(back.skin_body(&beta, &theta, t).unwrap(), model.skin_body(&beta, &theta, t).unwrap());
}

#[test]
fn fit_model_json_round_trips_and_encodes_new_garments() {
    let model = build_procedural_body(16, 6, 0).unwrap();
    let family = GarmentFamily::default();
    let mut pairs = Vec::new();
    for (k, beta0) in [-0.8, 0.0, 0.6].into_iter().enumerate() {
        let mut beta = vec![0.0; model.shape_count()];
        beta[0] = beta0;
        let body = model.unposed_body(&beta).unwrap();
        for (g, radius) in [0.18, 0.2, 0.22].into_iter().enumerate() {
            let garment = generate_garment(&family, 0.4, radius, 24, g as u64).unwrap();
            pairs.push(FitPair::new(format!("G{g}"), format!("B{k}"), garment, body.clone()).unwrap());
        }
    }
    let registry = PairRegistry::new(pairs).unwrap();
    let d = distance_matrix(&registry).unwrap();
    let fit = fit_factor_analysis(&d, 3, 1e-9, 500, 1).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit_model.json");
    fit.save_json(&path).unwrap();
    let back = FitModel::load_json(&path).unwrap();
    assert_eq!(back, fit);

    let body = model.unposed_body(&vec![0.0; model.shape_count()]).unwrap();
    let garment = generate_garment(&family, 0.42, 0.19, 26, 9).unwrap();
    let indicator = nearest_vertex_map(&garment, &body).unwrap();
    let alpha = back.alpha_for(&garment, &body, &indicator).unwrap();
    assert_eq!(alpha.len(), 3);
    assert!(alpha.iter().all(|a| a.is_finite()));
}
