use proptest::prelude::*;
use vatlab::formats::export::{self, read_csv, SdNormRow, SweepRow};
use vatlab::formats::idx::{self, IMAGES_MAGIC, LABELS_MAGIC};
use vatlab::formats::{vatd, vatm};
use vatlab::VatlabError;
use vatlab_core::{Classifier, ClassifierSpec, Dataset, Rng, Tensor};

#[test]
fn idx_round_trip_plain_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
    for name in ["imgs", "imgs.gz"] {
        let p = dir.path().join(name);
        idx::write_idx(&p, IMAGES_MAGIC, &[3, 4, 5], &pixels).unwrap();
        let a = idx::read_idx(&p).unwrap();
        assert_eq!(a.magic, IMAGES_MAGIC);
        assert_eq!(a.dims, vec![3, 4, 5]);
        assert_eq!(a.data, pixels);
    }
    let raw = std::fs::read(dir.path().join("imgs.gz")).unwrap();
    assert_eq!(&raw[..2], &[0x1f, 0x8b]);
}

#[test]
fn idx_dataset_scales_and_flattens() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    let mut px = vec![0u8; 2 * 28 * 28];
    px[784] = 255;
    px[785] = 51;
    idx::write_idx(&ip, IMAGES_MAGIC, &[2, 28, 28], &px).unwrap();
    idx::write_idx(&lp, LABELS_MAGIC, &[2], &[3, 9]).unwrap();
    let d = idx::load_idx(&ip, &lp).unwrap();
    assert_eq!((d.len(), d.dim()), (2, 784));
    assert!(d.inputs.row(0).iter().all(|&v| v == 0.0));
    assert_eq!(d.inputs.row(1)[0], 1.0);
    assert_eq!(d.inputs.row(1)[1], 0.2);
    assert_eq!(d.labels().unwrap(), &[3, 9]);
}

fn data_err<T: std::fmt::Debug>(r: vatlab::Result<T>) -> String {
    match r {
        Err(e @ VatlabError::Data(_)) => {
            assert_eq!(e.exit_code(), 2);
            e.to_string()
        }
        other => panic!("expected a data error, got {:?}", other),
    }
}

#[test]
fn idx_rejects_bad_files() {
    let good = idx::encode_idx(IMAGES_MAGIC, &[2, 2, 2], &[1; 8]);
    assert!(data_err(idx::parse_idx(&good[..good.len() - 1], "t")).contains("truncated"));
    assert!(data_err(idx::parse_idx(&good[..6], "t")).contains("truncated"));
    let mut bad = good.clone();
    bad[0] = 7;
    assert!(data_err(idx::parse_idx(&bad, "t")).contains("magic"));

    let imgs = idx::parse_idx(&good, "i").unwrap();
    let labels = idx::parse_idx(&idx::encode_idx(LABELS_MAGIC, &[3], &[0, 1, 2]), "l").unwrap();
    assert!(data_err(idx::dataset_from_idx(&imgs, &labels, "x")).contains("2 images but 3 labels"));
    assert!(data_err(idx::dataset_from_idx(&labels, &labels, "x")).contains("magic"));
}

#[test]
fn bundled_subset_parses() {
    let dir = vatlab::experiments::bundled_data_dir();
    let d = idx::load_idx(&dir.join("mnist10k-images-idx3-ubyte.gz"), &dir.join("mnist10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!((d.len(), d.dim(), d.num_classes()), (10_000, 784, 10));
    assert!(d.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn model_file_round_trip_and_rejections() {
    let spec = ClassifierSpec::new(5, &[7, 3], 4).with_noise(0.3);
    let m = Classifier::init(spec, &mut Rng::new(2)).unwrap();
    let bytes = vatm::encode_model(&m);
    assert_eq!(&bytes[..4], b"VATM");
    assert_eq!(vatm::decode_model(&bytes).unwrap(), m);

    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(data_err(vatm::decode_model(&wrong)).contains("magic"));
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(data_err(vatm::decode_model(&v2)).contains("version"));
    data_err(vatm::decode_model(&bytes[..bytes.len() - 3]));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.vatm");
    vatm::save_model(&p, &m).unwrap();
    assert_eq!(vatm::load_model(&p).unwrap(), m);
}

#[test]
fn csv_headers_are_fixed() {
    let d = Dataset::new("d", Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 3.25]).unwrap(), Some(vec![1, 0])).unwrap();
    assert_eq!(export::dataset_csv(&d), "x0,x1,label\n0.5,-1.0,1\n2.0,3.25,0\n");
    assert_eq!(export::dataset_csv(&d.clone().without_labels()).lines().nth(1), Some("0.5,-1.0,"));
    let sweep = export::sweep_csv(&[SweepRow { eps: 0.1, val_error: 0.25, r_vadv_final: 1e-3 }]);
    assert_eq!(read_csv(&sweep).0, ["eps", "val_error", "r_vadv_final"]);
    let sd = export::sdnorm_csv(&[SdNormRow { update: 9, k: 1, sd_norm: 0.5 }]);
    assert_eq!(sd, "update,K,sd_norm\n9,1,0.5\n");
}

proptest! {
    #[test]
    fn dataset_cache_is_bit_exact(
        rows in 0usize..20,
        cols in 1usize..6,
        seed in any::<u64>(),
        labeled in any::<bool>(),
        name in "[a-z0-9-]{0,12}",
    ) {
        let mut rng = Rng::new(seed);
        let mut x: Vec<f64> = (0..rows * cols).map(|_| rng.gaussian() * 1e3).collect();
        if let Some(v) = x.first_mut() {
            *v = -0.0;
        }
        let labels = labeled.then(|| (0..rows).map(|_| rng.below(10)).collect());
        let d = Dataset::new(&name, Tensor::matrix(rows, cols, x).unwrap(), labels).unwrap();
        let back = vatd::decode_dataset(&vatd::encode_dataset(&d)).unwrap();
        prop_assert_eq!(back.name.clone(), d.name.clone());
        prop_assert_eq!(back.labels.clone(), d.labels.clone());
        prop_assert_eq!(back.inputs.shape(), d.inputs.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.inputs), bits(&d.inputs));
    }
}

#[test]
fn dataset_cache_rejects_garbage() {
    let d = Dataset::new("d", Tensor::matrix(1, 1, vec![1.0]).unwrap(), None).unwrap();
    let bytes = vatd::encode_dataset(&d);
    data_err(vatd::decode_dataset(&bytes[..bytes.len() - 1]));
    let mut extra = bytes.clone();
    extra.push(0);
    data_err(vatd::decode_dataset(&extra));
    data_err(vatd::decode_dataset(b"VATM\x01"));
}
