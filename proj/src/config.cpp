#include "fullglow/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace fullglow {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"n_blocks", [](RunConfig& c, auto& k, auto& v) { c.model.n_blocks = parse_unsigned(k, v); }},
      {"n_flows", [](RunConfig& c, auto& k, auto& v) { c.model.n_flows = parse_unsigned(k, v); }},
      {"image_size", [](RunConfig& c, auto& k, auto& v) { c.model.image_size = parse_unsigned(k, v); }},
      {"in_channels", [](RunConfig& c, auto& k, auto& v) { c.model.in_channels = parse_unsigned(k, v); }},
      {"lr", [](RunConfig& c, auto& k, auto& v) { c.train.learning_rate = parse_double(k, v); }},
      {"lambda",
       [](RunConfig& c, auto& k, auto& v) { c.model.lambda = c.train.lambda = parse_double(k, v); }},
      {"conditioning_mode", [](RunConfig& c, auto&, auto& v) { c.model.conditioning = parse_conditioning_mode(v); }},
      {"use_boundary", [](RunConfig& c, auto& k, auto& v) { c.model.use_boundary = parse_bool(k, v); }},
      {"boundary_mode", [](RunConfig& c, auto&, auto& v) { c.model.boundary_mode = parse_boundary_mode(v); }},
      {"temperature", [](RunConfig& c, auto& k, auto& v) { c.model.temperature = parse_double(k, v); }},
      {"coupling_hidden", [](RunConfig& c, auto& k, auto& v) { c.model.coupling_hidden = parse_unsigned(k, v); }},
      {"hidden_init_scale", [](RunConfig& c, auto& k, auto& v) { c.model.hidden_init_scale = parse_double(k, v); }},
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.model.seed = c.train.seed = parse_unsigned(k, v); }},
      {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = parse_unsigned(k, v); }},
      {"init_batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.init_batch_size = parse_unsigned(k, v); }},
      {"iterations", [](RunConfig& c, auto& k, auto& v) { c.train.iterations = parse_unsigned(k, v); }},
      {"checkpoint_interval",
       [](RunConfig& c, auto& k, auto& v) { c.train.checkpoint_interval = parse_unsigned(k, v); }},
      {"checkpointing", [](RunConfig& c, auto& k, auto& v) { c.train.checkpointing = parse_bool(k, v); }},
      {"linear_decay", [](RunConfig& c, auto& k, auto& v) { c.train.linear_decay = parse_bool(k, v); }},
  };
  return table;
}

const Setter* find_setter(const std::string& key) {
  for (const auto& [name, fn] : setters()) {
    if (name == key) return &fn;
  }
  return nullptr;
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& [name, fn] : setters()) out.push_back(name);
    return out;
  }();
  return keys;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::vector<std::string> problems;
  std::istringstream in(text);
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back("line " + std::to_string(number) + ": expected key = value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    if (out.count(key)) problems.push_back("line " + std::to_string(number) + ": duplicate key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  if (!problems.empty()) {
    std::string msg = "malformed config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return out;
}

RunConfig apply_run_config(const RunConfig& base, const std::map<std::string, std::string>& values) {
  RunConfig out = base;
  std::vector<std::string> problems;
  for (const auto& [key, value] : values) {
    const Setter* set = find_setter(key);
    if (!set) {
      problems.push_back("unknown key '" + key + "'");
      continue;
    }
    try {
      (*set)(out, key, value);
    } catch (const ConfigError& e) {
      problems.push_back(e.what());
    }
  }
  for (auto check : {std::function<void()>([&] { out.model.validate(); }),
                     std::function<void()>([&] { out.train.validate(); })}) {
    if (!problems.empty()) break;
    try {
      check();
    } catch (const ConfigError& e) {
      problems.push_back(e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return out;
}

RunConfig parse_run_config(const std::string& text) { return apply_run_config(RunConfig{}, parse_key_values(text)); }

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "n_blocks=" << c.n_blocks << '\n'
     << "n_flows=" << c.n_flows << '\n'
     << "image_size=" << c.image_size << '\n'
     << "in_channels=" << c.in_channels << '\n'
     << "lambda=" << format_double(c.lambda) << '\n'
     << "conditioning_mode=" << to_string(c.conditioning) << '\n'
     << "use_boundary=" << (c.use_boundary ? "true" : "false") << '\n'
     << "boundary_mode=" << to_string(c.boundary_mode) << '\n'
     << "temperature=" << format_double(c.temperature) << '\n'
     << "coupling_hidden=" << c.coupling_hidden << '\n'
     << "hidden_init_scale=" << format_double(c.hidden_init_scale) << '\n'
     << "seed=" << c.seed << '\n';
  return os.str();
}

ModelConfig parse_model_config(const std::string& text) {
  static const std::vector<std::string> model_keys = {"n_blocks",     "n_flows",       "image_size",
                                                      "in_channels",  "lambda",        "conditioning_mode",
                                                      "use_boundary", "boundary_mode", "temperature",
                                                      "coupling_hidden", "hidden_init_scale", "seed"};
  const auto values = parse_key_values(text);
  for (const auto& [key, value] : values) {
    if (std::find(model_keys.begin(), model_keys.end(), key) == model_keys.end()) {
      throw FormatError("stored model config has unknown key '" + key + "'");
    }
  }
  try {
    return apply_run_config(RunConfig{}, values).model;
  } catch (const ConfigError& e) {
    throw FormatError(std::string("stored model config is invalid: ") + e.what());
  }
}

}  // namespace fullglow
