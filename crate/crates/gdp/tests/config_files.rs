use gdp::config::Config;

#[test]
fn default_config_file_round_trip() {
    let text = Config::default().to_toml().unwrap();
    let parsed = Config::from_toml_str(&text).unwrap();
    assert_eq!(parsed, Config::default());
}
