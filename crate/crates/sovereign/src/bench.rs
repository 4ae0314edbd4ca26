//! Execution-time breakdown of the publish and receive paths.
//!
//! Each iteration walks one message through the same steps the entity
//! pipeline takes, timing every step and charging it to a category:
//!
//! publish: name + local produce check, envelope encode, AES-CBC encrypt,
//! signed-portion encode, ECDSA sign, packet encode, frame fingerprint.
//!
//! receive: frame fingerprint, packet decode, signed-portion encode, ECDSA
//! verify (signer certificate already cached), produce check, envelope
//! decode, AES-CBC decrypt, plaintext decode.

use std::time::Instant;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;
use sovereign_core::controller::{HomeState, RuleEntry};
use sovereign_core::crypto::{self, Keypair};
use sovereign_core::name::Name;
use sovereign_core::naming;
use sovereign_core::policy::PolicySet;
use sovereign_core::tlv::{self, app, Data, Fields, Packet, SigInfo, SigType};

pub const DEFAULT_PAYLOAD: usize = 256;
pub const DEFAULT_ITERATIONS: usize = 500;
const WARMUP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Category {
    #[serde(rename = "ECDSA")]
    Ecdsa,
    #[serde(rename = "AES CBC")]
    AesCbc,
    #[serde(rename = "policy checking")]
    PolicyChecking,
    #[serde(rename = "encode/decode")]
    EncodeDecode,
    #[serde(rename = "other crypto")]
    OtherCrypto,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Ecdsa, Category::AesCbc, Category::PolicyChecking, Category::EncodeDecode, Category::OtherCrypto];

    pub fn label(self) -> &'static str {
        match self {
            Category::Ecdsa => "ECDSA",
            Category::AesCbc => "AES CBC",
            Category::PolicyChecking => "policy checking",
            Category::EncodeDecode => "encode/decode",
            Category::OtherCrypto => "other crypto",
        }
    }

    /// The asymmetric-signature category.
    pub fn is_asymmetric(self) -> bool {
        self == Category::Ecdsa
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryStat {
    pub category: Category,
    pub median_us: f64,
    /// Median absolute deviation.
    pub epsilon_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathReport {
    pub path: String,
    pub categories: Vec<CategoryStat>,
    pub total_median_us: f64,
}

impl PathReport {
    pub fn stat(&self, c: Category) -> Option<&CategoryStat> {
        self.categories.iter().find(|s| s.category == c)
    }

    /// The category with the largest median.
    pub fn largest(&self) -> Option<Category> {
        self.categories.iter().max_by(|a, b| a.median_us.total_cmp(&b.median_us)).map(|s| s.category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub payload_bytes: usize,
    pub iterations: usize,
    pub policies: usize,
    pub publish: PathReport,
    pub receive: PathReport,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "payload {} bytes, {} iterations, {} policies\n{:<16} {:>14} {:>14}\n",
            self.payload_bytes, self.iterations, self.policies, "category", "publish us", "receive us"
        );
        for c in Category::ALL {
            let cell = |p: &PathReport| {
                p.stat(c).map_or("-".to_string(), |x| format!("{:.2}±{:.2}", x.median_us, x.epsilon_us))
            };
            s.push_str(&format!("{:<16} {:>14} {:>14}\n", c.label(), cell(&self.publish), cell(&self.receive)));
        }
        s.push_str(&format!(
            "{:<16} {:>14.2} {:>14.2}\n",
            "total", self.publish.total_median_us, self.receive.total_median_us
        ));
        s
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summarize(path: &str, samples: &[[f64; 5]]) -> PathReport {
    let categories = Category::ALL
        .iter()
        .enumerate()
        .map(|(i, &category)| {
            let mut xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let m = median(&mut xs);
            let mut dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
            CategoryStat { category, median_us: m, epsilon_us: median(&mut dev) }
        })
        .collect();
    let mut totals: Vec<f64> = samples.iter().map(|s| s.iter().sum()).collect();
    PathReport { path: path.to_string(), categories, total_median_us: median(&mut totals) }
}

/// A home with a realistic rule set: default controller rules plus the
/// per-device templates for a dozen devices and a few cross-service rules.
fn sample_policies(home: &Name, rng: &mut ChaCha20Rng) -> PolicySet {
    let mut state = HomeState::init_with_prefix(home.clone(), 0, 3_600_000, rng).expect("valid home");
    let devices = [
        ("TEMP", "bedroom", "t1"),
        ("TEMP", "kitchen", "t2"),
        ("AirCon", "bedroom", "ac1"),
        ("Window", "bedroom", "w1"),
        ("Window", "kitchen", "w2"),
        ("LOCK", "front", "l1"),
        ("Light", "kitchen", "k1"),
        ("Light", "kitchen", "k2"),
        ("Light", "hall", "h1"),
        ("Switch", "hall", "s1"),
        ("Contact", "hall", "c1"),
        ("APP", "hall", "auto"),
    ];
    let mut rules: Vec<String> = Vec::new();
    for (svc, loc, id) in devices {
        rules.push(format!("{svc}/{loc}/{id} produce {svc}/CONTENT/{loc}"));
        rules.push(format!("{svc}/{loc}/{id} decrypt {svc}/CMD"));
    }
    rules.extend(
        [
            "AirCon/bedroom decrypt TEMP/CONTENT/bedroom",
            "AirCon/bedroom produce Window/CMD/bedroom",
            "APP/hall decrypt Contact/CONTENT/hall",
            "APP/hall produce Switch/CMD/hall",
        ]
        .map(String::from),
    );
    for r in rules {
        let id = state.next_rule_id;
        state.next_rule_id += 1;
        state.rules.push(RuleEntry { id, rule: r.parse().expect("valid rule") });
    }
    state.policy_set()
}

/// Times `iterations` messages of `payload_bytes` through both paths.
pub fn run(iterations: usize, payload_bytes: usize, seed: u64) -> BenchReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let home: Name = "/bench-home".parse().expect("constant");
    let policies = sample_policies(&home, &mut rng);
    let producer = home.with("TEMP").with("bedroom").with("t1");
    let receiver = home.with("AirCon").with("bedroom").with("ac1");
    let identity = Keypair::generate(&mut rng);
    let public = identity.public_bytes();
    let locator = crypto::key_name(&producer, &identity);
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    let dkey = home.with("TEMP").with("bedroom").with(naming::DKEY).child(sovereign_core::name::NameComponent::from_timestamp(1));
    let topic = home.with("TEMP").with(naming::CONTENT).with("bedroom").with("t1").with("temp");
    let mut payload = vec![0u8; payload_bytes];
    rng.fill_bytes(&mut payload);

    let mut publish = Vec::with_capacity(iterations);
    let mut receive = Vec::with_capacity(iterations);
    for i in 0..iterations + WARMUP {
        let mut p = [0f64; 5];
        let mut r = [0f64; 5];
        let lap = |slot: &mut [f64; 5], c: Category, t: Instant| slot[c as usize] += t.elapsed().as_secs_f64() * 1e6;

        // ---- publish ----
        let t = Instant::now();
        let name = naming::with_timestamp(&topic, 1_000 + i as u64);
        let allowed = policies.check_produce(&producer, &name).is_allow();
        lap(&mut p, Category::PolicyChecking, t);
        assert!(allowed, "bench producer must be authorized");

        let t = Instant::now();
        let plain = tlv::encode_tlv(app::PAYLOAD, &payload);
        lap(&mut p, Category::EncodeDecode, t);

        let t = Instant::now();
        let ciphertext = crypto::encrypt(&key, &plain, &mut rng);
        lap(&mut p, Category::AesCbc, t);

        let t = Instant::now();
        let mut content = tlv::encode_tlv(app::KEY_NAME, &tlv::encode_name(&dkey));
        tlv::write_tlv(&mut content, app::CIPHERTEXT, &ciphertext);
        let mut data = Data::new(name, content, SigInfo { sig_type: SigType::EcdsaSha256, key_locator: Some(locator.clone()) });
        let signed = data.signed_portion();
        lap(&mut p, Category::EncodeDecode, t);

        let t = Instant::now();
        data.sig_value = crypto::sign(&identity, &signed);
        lap(&mut p, Category::Ecdsa, t);

        let t = Instant::now();
        let wire = Packet::Data(data).encode().expect("encodes");
        lap(&mut p, Category::EncodeDecode, t);

        let t = Instant::now();
        let fingerprint = crypto::sha256(&wire);
        lap(&mut p, Category::OtherCrypto, t);

        // ---- receive ----
        let t = Instant::now();
        let seen = crypto::sha256(&wire);
        lap(&mut r, Category::OtherCrypto, t);
        assert_eq!(seen, fingerprint);

        let t = Instant::now();
        let Ok(Packet::Data(got)) = tlv::decode_packet(&wire) else { panic!("bench packet must decode") };
        let signed = got.signed_portion();
        lap(&mut r, Category::EncodeDecode, t);

        let t = Instant::now();
        let ok = crypto::verify(&public, &signed, &got.sig_value);
        lap(&mut r, Category::Ecdsa, t);
        assert!(ok, "bench signature must verify");

        let t = Instant::now();
        let allowed = policies.check_produce(&producer, &got.name).is_allow()
            && policies.check_decrypt(&receiver, &dkey.prefix(dkey.len() - 1)).is_allow();
        lap(&mut r, Category::PolicyChecking, t);
        assert!(allowed, "bench receiver must be authorized");

        let t = Instant::now();
        let f = Fields::parse(&got.content).expect("envelope");
        let _key_name = tlv::decode_name(f.require(app::KEY_NAME, "key").expect("key")).expect("name");
        let ct = f.require(app::CIPHERTEXT, "ct").expect("ciphertext");
        lap(&mut r, Category::EncodeDecode, t);

        let t = Instant::now();
        let plain = crypto::decrypt(&key, ct).expect("decrypts");
        lap(&mut r, Category::AesCbc, t);

        let t = Instant::now();
        let out = Fields::parse(&plain).expect("plaintext").require(app::PAYLOAD, "payload").expect("payload").to_vec();
        lap(&mut r, Category::EncodeDecode, t);
        assert_eq!(out, payload);

        if i >= WARMUP {
            publish.push(p);
            receive.push(r);
        }
    }
    BenchReport {
        payload_bytes,
        iterations,
        policies: policies.policies.len(),
        publish: summarize("publish", &publish),
        receive: summarize("receive", &receive),
    }
}
