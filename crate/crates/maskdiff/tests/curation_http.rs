use std::sync::Arc;

use maskdiff::io;
use maskdiff::manifest;
use maskdiff::review::{self, ReviewStore, Submission};
use maskdiff_core::ellipse::{rasterize_filled_ellipse, EllipseParams};
use maskdiff_core::extraction::{extract, ExtractionStatus};
use maskdiff_core::image::compose_tri_channel;
use maskdiff_core::phantom::{generate_phantom, PhantomSpec};
use maskdiff_core::TrimesterLabel;
use serde_json::{json, Value};

fn submissions(n: usize) -> Vec<Submission> {
    (0..n)
        .map(|i| {
            let t = TrimesterLabel::ALL[i % 3];
            let p = generate_phantom(&PhantomSpec::random(t, 64, 100 + i as u64)).unwrap();
            let tri = compose_tri_channel(&p.image, &p.mask).unwrap();
            let mut extraction = extract(&tri, &Default::default());
            extraction.status = ExtractionStatus::NeedsReview;
            Submission {
                id: format!("syn-{i:03}"),
                trimester: t,
                image: p.image,
                extraction,
            }
        })
        .collect()
}

async fn start(store: Arc<ReviewStore>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(review::serve(listener, store));
    format!("http://{addr}")
}

#[tokio::test]
async fn review_flow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(ReviewStore::open(&dir.path().join("store")).unwrap());
    store.enqueue(&submissions(10), false).unwrap();
    let base = start(store.clone()).await;
    let http = reqwest::Client::new();

    let list: Value = http
        .get(format!("{base}/api/items?status=pending"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(list["schema_version"], 1);
    assert_eq!(list["total"], 10);
    let ids: Vec<String> = list["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["id"].as_str().unwrap().to_string())
        .collect();

    let img = http.get(format!("{base}/api/items/{}/image.png", ids[0])).send().await.unwrap();
    assert_eq!(img.status(), 200);
    assert_eq!(img.headers()["content-type"], "image/png");

    let edits = [
        EllipseParams { cx: 30.25, cy: 31.5, a: 14.0, b: 9.5, theta: 0.4 },
        EllipseParams { cx: 33.0, cy: 29.75, a: 11.0, b: 10.0, theta: 2.9 },
    ];
    for (i, id) in ids.iter().enumerate() {
        let body = match i {
            0 | 1 => json!({ "action": "accept_with_edit", "ellipse": edits[i] }),
            2..=5 => json!({ "action": "accept" }),
            _ => json!({ "action": "reject" }),
        };
        let r = http.post(format!("{base}/api/items/{id}/decision")).json(&body).send().await.unwrap();
        assert_eq!(r.status(), 200, "{id}");
    }

    let again = http
        .post(format!("{base}/api/items/{}/decision", ids[0]))
        .json(&json!({ "action": "reject" }))
        .send()
        .await
        .unwrap();
    assert_eq!(again.status(), 409);
    let err: Value = again.json().await.unwrap();
    assert_eq!(err["error"]["code"], "already_decided");

    let missing = http.get(format!("{base}/api/items/nope")).send().await.unwrap();
    assert_eq!(missing.status(), 404);

    let bad = http
        .post(format!("{base}/api/items/{}/decision", ids[9]))
        .json(&json!({ "action": "accept_with_edit", "ellipse": { "cx": 1.0, "cy": 1.0, "a": -3.0, "b": 2.0, "theta": 0.0 } }))
        .send()
        .await
        .unwrap();
    assert!(bad.status() == 409 || bad.status() == 422);

    let out = dir.path().join("export/curated.json");
    let r: Value = http
        .post(format!("{base}/api/export"))
        .json(&json!({ "out": out }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(r["count"], 6);

    let m = manifest::DatasetManifest::load(&out).unwrap();
    assert_eq!(m.entries.len(), 6);
    let snap = store.snapshot();
    for e in &m.entries {
        let item = snap.get(&e.id).unwrap();
        let stored = item.effective_ellipse();
        let on_disk = io::read_mask(&out.parent().unwrap().join(&e.mask_path)).unwrap();
        assert_eq!(on_disk, rasterize_filled_ellipse(&stored, item.height, item.width), "{}", e.id);
    }
    let edited = snap.get(&ids[0]).unwrap().edited_ellipse.unwrap();
    assert!((edited.cx - 30.25).abs() < 1e-12 && (edited.theta - 0.4).abs() < 1e-12);

    let counts: Value = http.get(format!("{base}/api/items")).send().await.unwrap().json().await.unwrap();
    assert_eq!(counts["counts"]["accepted"], 6);
    assert_eq!(counts["counts"]["rejected"], 4);
    assert_eq!(counts["counts"]["pending"], 0);
}

#[tokio::test]
async fn bad_status_filter_is_400() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(ReviewStore::open(dir.path()).unwrap());
    let base = start(store).await;
    let r = reqwest::get(format!("{base}/api/items?status=maybe")).await.unwrap();
    assert_eq!(r.status(), 400);
}
