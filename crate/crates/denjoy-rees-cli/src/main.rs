fn main() {
    println!("denjoy-rees: construction CLI (subcommands land with the library modules)");
}
