use iqctube::config::ProjectConfig;
use iqctube::pipeline::{synthesize, CertificateFile};

#[test]
fn certificate_file_round_trips_bitwise_and_reverifies() {
    let cfg = ProjectConfig::example();
    let file = synthesize(&cfg).unwrap();
    let text = file.to_json().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("certificate.json");
    file.save(&path).unwrap();
    let (loaded, report) = CertificateFile::load_verified(&path, &cfg).unwrap();
    assert!(report.passes(), "{:?}", report.failures());
    assert_eq!(loaded.to_json().unwrap(), text);
    assert_eq!(CertificateFile::from_json(&text).unwrap().to_json().unwrap(), text);
}

#[test]
fn certificate_is_rejected_for_another_configuration() {
    let cfg = ProjectConfig::example();
    let file = synthesize(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("certificate.json");
    file.save(&path).unwrap();
    let mut other = cfg.clone();
    other.gamma_d *= 2.0;
    assert!(CertificateFile::load_verified(&path, &other).is_err());
}
