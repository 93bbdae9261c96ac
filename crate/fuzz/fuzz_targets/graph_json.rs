#![no_main]

use fedgraph::graph::{graph_from_json, graph_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = graph_from_json(data) {
        let again = graph_from_json(graph_to_json(&g).as_bytes()).expect("reencoded graph parses");
        assert_eq!(again.num_nodes(), g.num_nodes());
        assert_eq!(again.edges(), g.edges());
    }
});
