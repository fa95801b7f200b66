#include "fullglow/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "fullglow/config.hpp"

namespace fullglow {

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) problems.push_back("lr must be > 0");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (init_batch_size < 1) problems.push_back("init_batch_size must be >= 1");
  if (iterations < 1) problems.push_back("iterations must be >= 1");
  if (checkpoint_interval < 1) problems.push_back("checkpoint_interval must be >= 1");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) problems.push_back("lambda must be > 0");
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

// ---------------------------------------------------------------------------
// gradients

namespace {

template <typename T>
std::array<Tensor<T>, 4> values(const JointState<T>& s) {
  return {s.source.h.value(), s.source.logp.value(), s.target.h.value(), s.target.logp.value()};
}

template <typename T>
JointState<T> leaves(Tape<T>& tape, const std::array<Tensor<T>, 4>& v) {
  return {{tape.leaf(v[0]), tape.leaf(v[1])}, {tape.leaf(v[2]), tape.leaf(v[3])}};
}

template <typename T>
std::array<Var<T>, 4> vars(const JointState<T>& s) {
  return {s.source.h, s.source.logp, s.target.h, s.target.logp};
}

template <typename T>
double batch_mean(const Tensor<T>& v) {
  double total = 0.0;
  for (T x : v.data()) total += x;
  return total / static_cast<double>(v.size());
}

}  // namespace

template <typename T>
GradientReport loss_and_gradients(FullGlow<T>& model, const Tensor<T>& x_a, const Tensor<T>& x_b, double lambda,
                                  bool checkpointing, const Tensor<T>* boundary) {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be > 0");
  const auto bnd = model.boundary_pyramid(boundary);
  const std::size_t segments = model.segment_count();
  GradientReport report;

  if (!checkpointing) {
    Tape<T> tape(true);
    JointState<T> state = model.initial_state(tape, x_a, x_b);
    for (std::size_t i = 0; i < segments; ++i) model.joint_segment(i, state, bnd, false);
    Var<T> loss = model.objective(state, lambda);
    report.loss = loss.value().item();
    if (!std::isfinite(report.loss)) throw NumericalError("non-finite loss", "objective");
    report.logp_source = batch_mean(state.source.logp.value());
    report.logp_target = batch_mean(state.target.logp.value());
    report.stored_tensors = tape.node_count();
    report.stored_elements = report.peak_tape_elements = tape.stored_elements();
    tape.backward(loss);
    tape.accumulate_parameter_grads();
    return report;
  }

  // Forward: keep only the joint state at every segment boundary.
  std::vector<std::array<Tensor<T>, 4>> boundaries;
  boundaries.reserve(segments + 1);
  {
    Tape<T> tape(false);
    boundaries.push_back(values(model.initial_state(tape, x_a, x_b)));
  }
  for (std::size_t i = 0; i < segments; ++i) {
    Tape<T> tape(false);
    JointState<T> state = leaves(tape, boundaries.back());
    model.joint_segment(i, state, bnd, false);
    report.peak_tape_elements = std::max(report.peak_tape_elements, tape.stored_elements());
    boundaries.push_back(values(state));
  }
  for (const auto& b : boundaries) {
    report.stored_tensors += b.size();
    for (const auto& t : b) report.stored_elements += t.size();
  }

  // Seeds for the final state come from the objective alone.
  std::array<Tensor<T>, 4> seeds;
  {
    Tape<T> tape(true);
    JointState<T> state = leaves(tape, boundaries.back());
    Var<T> loss = model.objective(state, lambda);
    report.loss = loss.value().item();
    if (!std::isfinite(report.loss)) throw NumericalError("non-finite loss", "objective");
    report.logp_source = batch_mean(state.source.logp.value());
    report.logp_target = batch_mean(state.target.logp.value());
    tape.backward(loss);
    const auto in = vars(state);
    for (std::size_t k = 0; k < 4; ++k) seeds[k] = tape.grad(in[k]);
  }

  for (std::size_t i = segments; i-- > 0;) {
    Tape<T> tape(true);
    JointState<T> state = leaves(tape, boundaries[i]);
    const auto in = vars(state);
    model.joint_segment(i, state, bnd, false);
    report.peak_tape_elements = std::max(report.peak_tape_elements, tape.stored_elements());
    const auto out = vars(state);
    tape.backward(std::span<const Var<T>>(out.data(), out.size()), std::span<const Tensor<T>>(seeds.data(), 4));
    tape.accumulate_parameter_grads();
    for (std::size_t k = 0; k < 4; ++k) seeds[k] = tape.grad(in[k]);
  }
  return report;
}

// ---------------------------------------------------------------------------
// batches

namespace {

std::mt19937_64 iteration_rng(std::uint64_t seed, std::size_t iteration) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(std::uint64_t{iteration} >> 32),
                    0x46474c57u};
  return std::mt19937_64(seq);
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  Shape shape = items.front().shape();
  shape[0] = items.size();
  std::vector<T> data;
  data.reserve(shape_numel(shape));
  for (const auto& t : items) data.insert(data.end(), t.data().begin(), t.data().end());
  return Tensor<T>(shape, std::move(data));
}

template <typename T>
Batch<T> draw_batch(const std::vector<PairedSample>& data, std::size_t size, bool with_boundary, std::mt19937_64& rng) {
  if (data.empty()) throw ConfigError("training needs at least one sample");
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<Tensor<T>> src, tgt, bnd;
  for (std::size_t i = 0; i < size; ++i) {
    const PairedSample& s = data[pick(rng)];
    src.push_back(dequantize<T>(s.seg, rng));
    tgt.push_back(dequantize<T>(s.photo, rng));
    if (with_boundary) bnd.push_back(boundary_tensor<T>(s.boundary));
  }
  Batch<T> batch{stack(src), stack(tgt), {}};
  if (with_boundary) batch.boundary = stack(bnd);
  return batch;
}

}  // namespace

template <typename T>
Batch<T> training_batch(const std::vector<PairedSample>& data, const TrainConfig& config, bool with_boundary,
                        std::size_t iteration) {
  auto rng = iteration_rng(config.seed, iteration);
  return draw_batch<T>(data, config.batch_size, with_boundary, rng);
}

template <typename T>
Batch<T> initialization_batch(const std::vector<PairedSample>& data, const TrainConfig& config, bool with_boundary) {
  auto rng = iteration_rng(config.seed, std::numeric_limits<std::size_t>::max());
  return draw_batch<T>(data, config.init_batch_size, with_boundary, rng);
}

template <typename T>
Batch<T> evaluation_batch(const PairedSample& sample, bool with_boundary, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Batch<T> batch{dequantize<T>(sample.seg, rng), dequantize<T>(sample.photo, rng), {}};
  if (with_boundary) batch.boundary = boundary_tensor<T>(sample.boundary);
  return batch;
}

template <typename T>
std::vector<LossRecord> train(FullGlow<T>& model, TrainState<T>& state, const std::vector<PairedSample>& data,
                              const TrainConfig& config, const TrainHooks<T>& hooks) {
  config.validate();
  if (data.empty()) throw ConfigError("training needs at least one sample");
  const ModelConfig& mc = model.config();
  for (const auto& s : data) {
    if (s.seg.height != mc.image_size || s.seg.width != mc.image_size || s.seg.channels != mc.in_channels ||
        s.photo.height != mc.image_size || s.photo.width != mc.image_size || s.photo.channels != mc.in_channels) {
      throw ConfigError("dataset images do not match the model's " + std::to_string(mc.in_channels) + "x" +
                        std::to_string(mc.image_size) + "x" + std::to_string(mc.image_size) + " layout");
    }
  }
  const bool with_boundary = mc.use_boundary && mc.conditioning != ConditioningMode::unconditional;
  const double to_bits = 1.0 / (static_cast<double>(mc.dims()) * std::numbers::ln2);
  const auto params = model.parameters();

  std::vector<LossRecord> trace;
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t it = state.iteration; it < config.iterations; ++it) {
    if (!model.initialized()) {
      const Batch<T> init = initialization_batch<T>(data, config, with_boundary);
      model.initialize(init.source, init.target, with_boundary ? &init.boundary : nullptr);
    }
    const Batch<T> batch = training_batch<T>(data, config, with_boundary, it);
    const Tensor<T>* bnd = with_boundary ? &batch.boundary : nullptr;

    model.zero_grad();
    GradientReport report;
    try {
      report = loss_and_gradients(model, batch.source, batch.target, config.lambda, config.checkpointing, bnd);
    } catch (const NumericalError& e) {
      std::ostringstream os;
      os << "training diverged at iteration " << it << " (last finite loss " << last_finite << "): " << e.what();
      throw NumericalError(os.str(), e.where());
    }
    last_finite = report.loss;

    double lr = config.learning_rate;
    if (config.linear_decay) {
      lr *= 1.0 - static_cast<double>(it) / static_cast<double>(config.iterations);
    }
    adam_step<T>(params, state.adam, lr);
    state.iteration = it + 1;

    const LossRecord record{it, report.loss, -report.logp_source * to_bits, -report.logp_target * to_bits};
    trace.push_back(record);
    if (hooks.on_record) hooks.on_record(record);
    if (hooks.on_checkpoint && (state.iteration % config.checkpoint_interval == 0 || state.iteration == config.iterations)) {
      hooks.on_checkpoint(model, state);
    }
  }
  return trace;
}

template <typename T>
double mean_bpd(FullGlow<T>& model, const std::vector<PairedSample>& data, std::uint64_t seed) {
  if (data.empty()) throw ConfigError("mean_bpd: empty dataset");
  const ModelConfig& mc = model.config();
  const bool with_boundary = mc.use_boundary && mc.conditioning != ConditioningMode::unconditional;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Batch<T> b = evaluation_batch<T>(data[i], with_boundary, seed + i);
    total += model.bpd(b.target, b.source, with_boundary ? &b.boundary : nullptr);
  }
  return total / static_cast<double>(data.size());
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& trace) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(9);
  out << "iteration,loss,bpd_source,bpd_target\n";
  for (const auto& r : trace) out << r.iteration << ',' << r.loss << ',' << r.bpd_source << ',' << r.bpd_target << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

enum class EntryKind : std::uint8_t { parameter = 0, buffer = 1, first_moment = 2, second_moment = 3 };

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename U>
  void le(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void text(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  template <typename T>
  void entry(EntryKind kind, const std::string& name, const Tensor<T>& t) {
    le(static_cast<std::uint8_t>(kind));
    text(name);
    le(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) le(static_cast<std::uint32_t>(d));
    for (T v : t.data()) le(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : in_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_) + " while reading " + what);
    }
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string text(const char* what) {
    const auto n = le<std::uint32_t>(what);
    need(n, what);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
std::string encode_checkpoint(const FullGlow<T>& model, const TrainState<T>& state) {
  // parameters() hands out mutable pointers; nothing is modified here.
  auto& m = const_cast<FullGlow<T>&>(model);
  const auto params = m.parameters();
  const auto buffers = model.buffers();
  const bool moments = !state.adam.first_moment.empty();
  if (moments && (state.adam.first_moment.size() != params.size() || state.adam.second_moment.size() != params.size())) {
    throw UsageError("checkpoint: optimizer state does not match the model");
  }

  Writer w;
  w.bytes("FGLW", 4);
  w.le(kCheckpointVersion);
  w.text(model_config_text(model.config()));
  w.le(static_cast<std::uint64_t>(state.iteration));
  w.f64(state.adam.beta1);
  w.f64(state.adam.beta2);
  w.f64(state.adam.epsilon);
  w.le(static_cast<std::uint64_t>(state.adam.step));
  const std::size_t count = params.size() * (moments ? 3 : 1) + buffers.size();
  w.le(static_cast<std::uint32_t>(count));
  for (const auto* p : params) w.entry(EntryKind::parameter, p->name, p->value);
  for (const auto& [name, value] : buffers) w.entry(EntryKind::buffer, name, value);
  if (moments) {
    for (std::size_t i = 0; i < params.size(); ++i) w.entry(EntryKind::first_moment, params[i]->name, state.adam.first_moment[i]);
    for (std::size_t i = 0; i < params.size(); ++i) w.entry(EntryKind::second_moment, params[i]->name, state.adam.second_moment[i]);
  }
  return w.take();
}

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (bytes.compare(0, 4, "FGLW") != 0) throw FormatError("not a checkpoint: bad magic at byte 0");
  (void)r.le<std::uint32_t>("magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const ModelConfig config = parse_model_config(r.text("model config"));
  LoadedCheckpoint<T> out{FullGlow<T>(config), {}};
  out.state.iteration = r.le<std::uint64_t>("iteration");
  out.state.adam.beta1 = r.f64("adam beta1");
  out.state.adam.beta2 = r.f64("adam beta2");
  out.state.adam.epsilon = r.f64("adam epsilon");
  out.state.adam.step = r.le<std::uint64_t>("adam step");

  auto params = out.model.parameters();
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.size(); ++i) index[params[i]->name] = i;
  std::map<std::string, Tensor<T>> buffer_shapes;
  for (auto& [name, value] : out.model.buffers()) buffer_shapes.emplace(name, value);

  std::vector<bool> seen_param(params.size(), false);
  std::vector<Tensor<T>> first(params.size()), second(params.size());
  std::size_t moments_seen = 0;

  const auto count = r.le<std::uint32_t>("entry count");
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t at = r.pos();
    const auto kind = r.le<std::uint8_t>("entry kind");
    const std::string name = r.text("entry name");
    const auto rank = r.le<std::uint32_t>("entry rank");
    if (rank > 8) throw FormatError("entry '" + name + "' at byte " + std::to_string(at) + " has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint32_t>("entry dims");
    const std::size_t n = shape_numel(shape);
    r.need(n * 4, "entry values");
    std::vector<T> data(n);
    for (auto& v : data) v = static_cast<T>(std::bit_cast<float>(r.le<std::uint32_t>("entry values")));
    Tensor<T> value(shape, std::move(data));

    if (kind == static_cast<std::uint8_t>(EntryKind::buffer)) {
      if (!buffer_shapes.count(name)) throw FormatError("checkpoint names unknown buffer '" + name + "'");
      out.model.set_buffer(name, value);
      buffer_shapes.erase(name);
      continue;
    }
    auto it = index.find(name);
    if (it == index.end()) throw FormatError("checkpoint names unknown parameter '" + name + "'");
    Parameter<T>& p = *params[it->second];
    if (value.shape() != p.value.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_string(value.shape()) + ", model expects " +
                        shape_string(p.value.shape()));
    }
    switch (kind) {
      case static_cast<std::uint8_t>(EntryKind::parameter):
        p.value = std::move(value);
        seen_param[it->second] = true;
        break;
      case static_cast<std::uint8_t>(EntryKind::first_moment):
        first[it->second] = std::move(value);
        ++moments_seen;
        break;
      case static_cast<std::uint8_t>(EntryKind::second_moment):
        second[it->second] = std::move(value);
        ++moments_seen;
        break;
      default:
        throw FormatError("entry '" + name + "' at byte " + std::to_string(at) + " has unknown kind " +
                          std::to_string(kind));
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint entries at byte " + std::to_string(r.pos()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen_param[i]) throw FormatError("checkpoint is missing parameter '" + params[i]->name + "'");
  }
  if (!buffer_shapes.empty()) throw FormatError("checkpoint is missing buffer '" + buffer_shapes.begin()->first + "'");
  if (moments_seen != 0) {
    if (moments_seen != 2 * params.size()) throw FormatError("checkpoint has incomplete optimizer moments");
    out.state.adam.first_moment = std::move(first);
    out.state.adam.second_moment = std::move(second);
  }
  out.model.mark_initialized();
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const FullGlow<T>& model, const TrainState<T>& state) {
  const std::string bytes = encode_checkpoint(model, state);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint<T>(ss.str());
}

#define FULLGLOW_INSTANTIATE(T)                                                                                  \
  template GradientReport loss_and_gradients<T>(FullGlow<T>&, const Tensor<T>&, const Tensor<T>&, double, bool,   \
                                                const Tensor<T>*);                                                \
  template Batch<T> training_batch<T>(const std::vector<PairedSample>&, const TrainConfig&, bool, std::size_t);   \
  template Batch<T> initialization_batch<T>(const std::vector<PairedSample>&, const TrainConfig&, bool);          \
  template Batch<T> evaluation_batch<T>(const PairedSample&, bool, std::uint64_t);                                \
  template std::vector<LossRecord> train<T>(FullGlow<T>&, TrainState<T>&, const std::vector<PairedSample>&,       \
                                            const TrainConfig&, const TrainHooks<T>&);                            \
  template double mean_bpd<T>(FullGlow<T>&, const std::vector<PairedSample>&, std::uint64_t);                     \
  template std::string encode_checkpoint<T>(const FullGlow<T>&, const TrainState<T>&);                            \
  template LoadedCheckpoint<T> decode_checkpoint<T>(const std::string&);                                          \
  template void save_checkpoint<T>(const std::filesystem::path&, const FullGlow<T>&, const TrainState<T>&);       \
  template LoadedCheckpoint<T> load_checkpoint<T>(const std::filesystem::path&);

FULLGLOW_INSTANTIATE(float)
FULLGLOW_INSTANTIATE(double)
#undef FULLGLOW_INSTANTIATE

}  // namespace fullglow
