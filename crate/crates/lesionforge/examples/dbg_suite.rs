fn main() {
    match lesionforge::gradsuite::standard_suite(11, true) {
        Ok(entries) => {
            for e in entries { println!("{}: {} ({})", e.name, e.max_rel_err, e.probed); }
        }
        Err(e) => println!("ERROR: {e}"),
    }
}
