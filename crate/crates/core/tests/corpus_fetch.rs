use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use versegen::corpus::{
    build_split, fetch_poems_with, filter_rhyming, parse_poem_records, split_into_couplets, FetchOptions,
};
use versegen::tokenizer::{mean_couplet_tokens, train_bpe, vocab_sweep, BpeModel};

/// Serves `responses` in order, one per connection, and records request paths.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let paths = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&paths);
    thread::spawn(move || {
        for (status, body) in responses {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            log.lock().unwrap().push(line.split_whitespace().nth(1).unwrap_or("").to_string());
            loop {
                let mut header = String::new();
                if reader.read_line(&mut header).unwrap() == 0 || header == "\r\n" {
                    break;
                }
            }
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), paths)
}

fn page(ids: &[u32]) -> String {
    let records: Vec<String> = ids
        .iter()
        .map(|i| format!(r#"{{"id":"p{i}","title":"t","body":"the cat sat\tupon the mat"}}"#))
        .collect();
    format!("[{}]", records.join(","))
}

fn fast_opts(page_limit: usize) -> FetchOptions {
    FetchOptions { page_limit, page_size: 2, retries: 2, backoff: Duration::from_millis(5) }
}

#[test]
fn pages_until_empty() {
    let (base, paths) = serve(vec![(200, page(&[1, 2])), (200, page(&[3])), (200, "[]".into())]);
    let report = fetch_poems_with(&format!("{base}/poems?page={{page}}&size={{page_size}}"), &fast_opts(10)).unwrap();
    let ids: Vec<&str> = report.poems.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["p1", "p2", "p3"]);
    assert_eq!(*paths.lock().unwrap(), ["/poems?page=1&size=2", "/poems?page=2&size=2", "/poems?page=3&size=2"]);
}

#[test]
fn stops_at_page_limit() {
    let (base, paths) = serve(vec![(200, page(&[1])), (200, page(&[2])), (200, page(&[3]))]);
    let report = fetch_poems_with(&format!("{base}/?p={{page}}"), &fast_opts(2)).unwrap();
    assert_eq!(report.poems.len(), 2);
    assert_eq!(paths.lock().unwrap().len(), 2);
}

#[test]
fn retries_transient_failures() {
    let (base, paths) = serve(vec![(503, "busy".into()), (500, "oops".into()), (200, page(&[7]))]);
    let report = fetch_poems_with(&format!("{base}/all"), &fast_opts(1)).unwrap();
    assert_eq!(report.poems[0].id, "p7");
    assert_eq!(paths.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_retries() {
    let (base, _) = serve(vec![(500, String::new()); 3]);
    assert!(fetch_poems_with(&format!("{base}/all"), &fast_opts(1)).is_err());
}

#[test]
fn malformed_records_are_skipped_not_fatal() {
    let text = "{\"id\":\"a\",\"body\":\"x y\\tz w\"}\nnot json\n{\"title\":\"no id\"}\n{\"id\":\"b\",\"body\":\"q\\tr\"}\n";
    let report = parse_poem_records(text);
    assert_eq!(report.poems.len(), 2);
    assert_eq!(report.skipped.iter().map(|s| s.position).collect::<Vec<_>>(), [2, 3]);
}

fn bundled() -> Vec<versegen::corpus::Couplet> {
    let report = parse_poem_records(include_str!("../../../data/sample_poems.jsonl"));
    assert!(report.skipped.is_empty());
    report.poems.iter().flat_map(|p| split_into_couplets(p, "\t").couplets).collect()
}

#[test]
fn bundled_corpus_prepares() {
    let all = bundled();
    let rhyming = filter_rhyming(all.clone(), 2);
    assert!(rhyming.len() < all.len());
    let a = build_split(&rhyming, 0.95, 0).unwrap();
    let b = build_split(&rhyming, 0.95, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train.len() + a.validation.len(), rhyming.len());
    assert!(!a.validation.is_empty());
}

#[test]
fn tokenizer_round_trips_bundled_corpus() {
    let couplets = bundled();
    for size in [64, 128, 512] {
        let tok = train_bpe(&couplets, size).unwrap();
        let reloaded = BpeModel::from_text(&tok.to_text()).unwrap();
        assert_eq!(reloaded, tok);
        for c in &couplets {
            for text in [&c.first, &c.second] {
                assert_eq!(&tok.decode(&tok.encode(text)).unwrap(), text);
            }
        }
    }
    // Characters never seen in training fall back to byte nibbles.
    let tok = train_bpe(&couplets, 64).unwrap();
    let odd = "naïve ☾ 猫";
    assert_eq!(tok.decode(&tok.encode(odd)).unwrap(), odd);
}

#[test]
fn sweep_is_monotone() {
    let couplets = bundled();
    let points = vocab_sweep(&couplets, &[64, 128, 256, 512]).unwrap();
    for w in points.windows(2) {
        assert!(w[1].avg_tokens_per_couplet <= w[0].avg_tokens_per_couplet, "{points:?}");
    }
    let direct = mean_couplet_tokens(&train_bpe(&couplets, 128).unwrap(), &couplets);
    assert!((points[1].avg_tokens_per_couplet - direct).abs() < 1e-12);
}
