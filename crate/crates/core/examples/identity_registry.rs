//! DataSource registration with password and signature checks.

use medusa::identity::{authenticate, new_datasource_record, sign, verify_with_key, DataSource, Registry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let descriptor = DataSource {
        datasource_id: "syslog-7".into(),
        ip: "2001:db8::7".into(),
        port: 514,
        username: "collector".into(),
        url: "https://[2001:db8::7]/".into(),
    };
    let (record, credential) = new_datasource_record(&descriptor, "correct horse", &mut rng)?;
    let mut registry = Registry::new();
    registry.insert_record(record.clone())?;
    println!("duplicate insert: {:?}", registry.insert_record(record).unwrap_err());

    println!("right password: {}", authenticate(&registry, "syslog-7", "correct horse"));
    println!("wrong password: {}", authenticate(&registry, "syslog-7", "battery staple"));

    let signature = sign(&credential, b"GET /index.html");
    let pk = credential.public_key();
    println!("signature verifies: {}", verify_with_key(&pk, &signature, b"GET /index.html"));
    println!("altered message verifies: {}", verify_with_key(&pk, &signature, b"GET /admin.html"));
    println!("\n{}", registry.export());
    Ok(())
}
