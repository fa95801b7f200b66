#include "fullglow/model.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace fullglow {

std::string to_string(ConditioningMode mode) {
  switch (mode) {
    case ConditioningMode::full:
      return "full";
    case ConditioningMode::coupling_only:
      return "coupling_only";
    case ConditioningMode::unconditional:
      return "unconditional";
  }
  return "?";
}

ConditioningMode parse_conditioning_mode(const std::string& text) {
  if (text == "full") return ConditioningMode::full;
  if (text == "coupling_only") return ConditioningMode::coupling_only;
  if (text == "unconditional") return ConditioningMode::unconditional;
  throw ConfigError("conditioning_mode must be full, coupling_only or unconditional, got '" + text + "'");
}

std::string to_string(BoundaryMode mode) { return mode == BoundaryMode::binary ? "binary" : "bilinear"; }

BoundaryMode parse_boundary_mode(const std::string& text) {
  if (text == "bilinear") return BoundaryMode::bilinear;
  if (text == "binary") return BoundaryMode::binary;
  throw ConfigError("boundary_mode must be bilinear or binary, got '" + text + "'");
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (n_blocks < 1) problems.push_back("n_blocks must be >= 1");
  if (n_flows < 1) problems.push_back("n_flows must be >= 1");
  if (in_channels < 1) problems.push_back("in_channels must be >= 1");
  if (n_blocks >= 1 && n_blocks < 16 && (image_size == 0 || image_size % (std::size_t{1} << n_blocks) != 0)) {
    problems.push_back("image_size must be divisible by 2^n_blocks = " + std::to_string(std::size_t{1} << n_blocks));
  }
  if (n_blocks >= 16) problems.push_back("n_blocks is unreasonably large");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) problems.push_back("lambda must be > 0");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) problems.push_back("temperature must be >= 0");
  if (coupling_hidden < 1) problems.push_back("coupling_hidden must be >= 1");
  if (!(hidden_init_scale >= 0.0)) problems.push_back("hidden_init_scale must be >= 0");
  if (!problems.empty()) {
    std::ostringstream os;
    os << "invalid model config:";
    for (const auto& p : problems) os << "\n  " << p;
    throw ConfigError(os.str());
  }
}

// ---------------------------------------------------------------------------
// FlowStep

template <typename T>
FlowStep<T>::FlowStep(std::string name, const Layout& layout, std::uint64_t seed, double init_scale)
    : name_(std::move(name)), layout_(layout) {
  const std::size_t c = layout.channels;
  const std::size_t tri = c * (c - 1) / 2;
  const std::size_t side = layout.boundary ? 1 : 0;
  if (c < 2 || c % 2) throw ConfigError(name_ + ": channel count must be even and >= 2");

  actnorm_log_scale_ = {name_ + ".actnorm.log_scale", Tensor<T>(Shape{c}), {}};
  actnorm_shift_ = {name_ + ".actnorm.shift", Tensor<T>(Shape{c}), {}};
  if (layout.conditional_actnorm) {
    actnorm_cn_ = TrunkCN<T>(name_ + ".actnorm_cn", c + side, layout.height, layout.width, 2 * c);
    auto rng = module_rng(seed, name_ + ".actnorm_cn");
    actnorm_cn_.init_hidden(rng, init_scale);
    actnorm_cn_.set_constant_output(std::vector<T>(2 * c, T(0)));
  }

  // Same rotation stream whether or not the 1x1 convolution is conditional.
  auto rotation_rng = module_rng(seed, name_ + ".invconv");
  InvConvParams<T> rotation;
  if (layout.conditional_invconv) {
    invconv_cn_ = TrunkCN<T>(name_ + ".invconv_cn", c + side, layout.height, layout.width, c * c);
    auto rng = module_rng(seed, name_ + ".invconv_cn");
    invconv_cn_.init_hidden(rng, init_scale);
    rotation = init_conditional_invconv(invconv_cn_, c, rotation_rng);
  } else {
    rotation = random_rotation_lu<T>(c, rotation_rng);
  }
  perm_ = rotation.perm;
  sign_ = rotation.sign;
  invconv_lower_ = {name_ + ".invconv.lower", rotation.lower, {}};
  invconv_upper_ = {name_ + ".invconv.upper", rotation.upper, {}};
  invconv_log_scale_ = {name_ + ".invconv.log_scale", rotation.log_scale, {}};
  (void)tri;

  const std::size_t coupling_in = c / 2 + (layout.conditional_coupling ? c + side : 0);
  coupling_ = CouplingCN<T>(name_ + ".coupling", coupling_in, c, layout.hidden);
  auto rng = module_rng(seed, name_ + ".coupling");
  init_coupling_cn(coupling_, rng, init_scale);
}

template <typename T>
void FlowStep<T>::require_condition(const StepCondition<T>& cond) const {
  const bool conditional = layout_.conditional_actnorm || layout_.conditional_invconv || layout_.conditional_coupling;
  if (conditional && !cond.source) throw ConfigError(name_ + ": conditional step needs source activations");
  if (layout_.boundary && !cond.boundary) throw ConfigError(name_ + ": step expects a boundary map");
}

template <typename T>
Var<T> FlowStep<T>::side_input(Var<T> source, const StepCondition<T>& cond) const {
  if (!layout_.boundary) return source;
  return ops::concat_channels<T>({source, *cond.boundary});
}

template <typename T>
std::pair<Var<T>, Var<T>> FlowStep<T>::coupling_params(Var<T> x2, const StepCondition<T>& cond) {
  if (layout_.conditional_coupling) {
    return cn_coupling(coupling_, x2, cond.source->coupling, layout_.boundary ? cond.boundary : nullptr);
  }
  return coupling_(x2);
}

template <typename T>
StepResult<T> FlowStep<T>::forward(Var<T> x, const StepCondition<T>& cond, bool initialize) {
  require_condition(cond);
  const Shape expected{x.shape().empty() ? 0 : x.shape()[0], layout_.channels, layout_.height, layout_.width};
  if (x.shape() != expected) {
    throw ConfigError(name_ + ": input " + shape_string(x.shape()) + " does not match layout " +
                      shape_string(expected));
  }
  if (cond.source && cond.source->actnorm.shape() != x.shape()) {
    throw ConfigError(name_ + ": cached source activation " + shape_string(cond.source->actnorm.shape()) +
                      " does not match target " + shape_string(x.shape()));
  }
  Tape<T>& tape = x.tape();
  const std::size_t c = layout_.channels;

  Var<T> log_scale, shift;
  if (layout_.conditional_actnorm) {
    if (initialize) init_conditional_actnorm(actnorm_cn_, cond.source->actnorm.value(), x.value());
    auto p = cn_actnorm(actnorm_cn_, side_input(cond.source->actnorm, cond), c);
    log_scale = p.log_scale;
    shift = p.shift;
  } else {
    if (initialize) {
      auto p = actnorm_data_init(x.value());
      actnorm_log_scale_.value = p.log_scale;
      actnorm_shift_.value = p.shift;
    }
    log_scale = tape.parameter(actnorm_log_scale_);
    shift = tape.parameter(actnorm_shift_);
  }
  FlowOutput<T> a = actnorm(x, log_scale, shift, Direction::forward);

  FlowOutput<T> b;
  if (layout_.conditional_invconv) {
    auto p = cn_invconv(invconv_cn_, side_input(cond.source->invconv, cond), c);
    b = invconv(a.y, p.lower, p.upper, p.log_scale, perm_, sign_, Direction::forward);
  } else {
    b = invconv(a.y, tape.parameter(invconv_lower_), tape.parameter(invconv_upper_),
                tape.parameter(invconv_log_scale_), perm_, sign_, Direction::forward);
  }

  const CouplingNet<T> net = [&](Var<T> x2) { return coupling_params(x2, cond); };
  FlowOutput<T> cpl = affine_coupling(b.y, net, Direction::forward);
  if (!cpl.y.value().all_finite()) throw NumericalError("non-finite activation", name_);

  return {cpl.y, ops::add(ops::add(a.logdet, b.logdet), cpl.logdet), {a.y, b.y, cpl.y}};
}

template <typename T>
Var<T> FlowStep<T>::inverse(Var<T> y, const StepCondition<T>& cond) {
  require_condition(cond);
  if (cond.source && cond.source->actnorm.shape() != y.shape()) {
    throw ConfigError(name_ + ": cached source activation does not match target shape");
  }
  Tape<T>& tape = y.tape();
  const std::size_t c = layout_.channels;

  const CouplingNet<T> net = [&](Var<T> x2) { return coupling_params(x2, cond); };
  Var<T> h = affine_coupling(y, net, Direction::inverse).y;

  if (layout_.conditional_invconv) {
    auto p = cn_invconv(invconv_cn_, side_input(cond.source->invconv, cond), c);
    h = invconv(h, p.lower, p.upper, p.log_scale, perm_, sign_, Direction::inverse).y;
  } else {
    h = invconv(h, tape.parameter(invconv_lower_), tape.parameter(invconv_upper_),
                tape.parameter(invconv_log_scale_), perm_, sign_, Direction::inverse)
            .y;
  }

  if (layout_.conditional_actnorm) {
    auto p = cn_actnorm(actnorm_cn_, side_input(cond.source->actnorm, cond), c);
    h = actnorm(h, p.log_scale, p.shift, Direction::inverse).y;
  } else {
    h = actnorm(h, tape.parameter(actnorm_log_scale_), tape.parameter(actnorm_shift_), Direction::inverse).y;
  }
  if (!h.value().all_finite()) throw NumericalError("non-finite activation in inverse", name_);
  return h;
}

template <typename T>
std::vector<Parameter<T>*> FlowStep<T>::parameters() {
  std::vector<Parameter<T>*> out;
  if (layout_.conditional_actnorm) {
    for (auto* p : actnorm_cn_.parameters()) out.push_back(p);
  } else {
    out.push_back(&actnorm_log_scale_);
    out.push_back(&actnorm_shift_);
  }
  if (layout_.conditional_invconv) {
    for (auto* p : invconv_cn_.parameters()) out.push_back(p);
  } else {
    out.push_back(&invconv_lower_);
    out.push_back(&invconv_upper_);
    out.push_back(&invconv_log_scale_);
  }
  for (auto* p : coupling_.parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> FlowStep<T>::buffers() const {
  const std::size_t c = layout_.channels;
  Tensor<T> perm(Shape{c}), sign(Shape{c});
  for (std::size_t i = 0; i < c; ++i) {
    perm[i] = static_cast<T>(perm_[i]);
    sign[i] = sign_[i];
  }
  return {{name_ + ".invconv.perm", perm}, {name_ + ".invconv.sign", sign}};
}

template <typename T>
void FlowStep<T>::set_buffer(const std::string& name, const Tensor<T>& value) {
  const std::size_t c = layout_.channels;
  if (value.shape() != Shape{c}) throw FormatError("buffer " + name + " has shape " + shape_string(value.shape()));
  if (name == name_ + ".invconv.perm") {
    std::vector<std::size_t> perm(c);
    std::vector<bool> seen(c, false);
    for (std::size_t i = 0; i < c; ++i) {
      const auto v = static_cast<long long>(value[i]);
      if (v < 0 || static_cast<std::size_t>(v) >= c || seen[static_cast<std::size_t>(v)] ||
          static_cast<T>(v) != value[i]) {
        throw FormatError("buffer " + name + " is not a permutation");
      }
      seen[static_cast<std::size_t>(v)] = true;
      perm[i] = static_cast<std::size_t>(v);
    }
    perm_ = std::move(perm);
  } else if (name == name_ + ".invconv.sign") {
    for (std::size_t i = 0; i < c; ++i) {
      if (value[i] != T(1) && value[i] != T(-1)) throw FormatError("buffer " + name + " must hold +-1");
      sign_[i] = value[i];
    }
  } else {
    throw FormatError("unknown buffer " + name);
  }
}

// ---------------------------------------------------------------------------
// caches

template <typename T>
ActivationCache<T> CachedCondition<T>::bind(Tape<T>& tape) const {
  ActivationCache<T> cache;
  cache.steps.reserve(steps.size());
  for (const auto& s : steps) {
    cache.steps.push_back({tape.constant(s[0]), tape.constant(s[1]), tape.constant(s[2])});
  }
  for (const auto& b : boundary) cache.boundary.push_back(tape.constant(b));
  return cache;
}

template <typename T>
CachedCondition<T> CachedCondition<T>::capture(const ActivationCache<T>& cache) {
  CachedCondition<T> out;
  for (const auto& s : cache.steps) out.steps.push_back({s.actnorm.value(), s.invconv.value(), s.coupling.value()});
  for (const auto& b : cache.boundary) out.boundary.push_back(b.value());
  return out;
}

// ---------------------------------------------------------------------------
// FullGlow

template <typename T>
FullGlow<T>::FullGlow(const ModelConfig& config) : config_(config) {
  config_.validate();
  const bool full = config_.conditioning == ConditioningMode::full;
  const bool coupled = config_.conditioning != ConditioningMode::unconditional;
  source_.reserve(segment_count());
  target_.reserve(segment_count());
  std::size_t c = config_.in_channels, size = config_.image_size;
  for (std::size_t b = 0; b < config_.n_blocks; ++b) {
    c *= 4;
    size /= 2;
    for (std::size_t k = 0; k < config_.n_flows; ++k) {
      const std::string suffix = ".b" + std::to_string(b) + ".f" + std::to_string(k);
      typename FlowStep<T>::Layout layout{c, size, size, config_.coupling_hidden, false, false, false, false};
      source_.emplace_back("src" + suffix, layout, config_.seed, config_.hidden_init_scale);
      layout.conditional_actnorm = full;
      layout.conditional_invconv = full;
      layout.conditional_coupling = coupled;
      layout.boundary = coupled && config_.use_boundary;
      target_.emplace_back("tgt" + suffix, layout, config_.seed, config_.hidden_init_scale);
    }
    if (b + 1 < config_.n_blocks) c /= 2;
  }
}

template <typename T>
std::vector<Shape> FullGlow<T>::pyramid_shapes(std::size_t batch) const {
  std::vector<Shape> out;
  std::size_t c = config_.in_channels, size = config_.image_size;
  for (std::size_t b = 0; b < config_.n_blocks; ++b) {
    c *= 4;
    size /= 2;
    if (b + 1 < config_.n_blocks) {
      out.push_back({batch, c / 2, size, size});
      c /= 2;
    } else {
      out.push_back({batch, c, size, size});
    }
  }
  return out;
}

template <typename T>
void FullGlow<T>::check_image(const Shape& s, const char* what) const {
  if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.image_size || s[3] != config_.image_size) {
    throw ConfigError(std::string(what) + ": expected N x " + std::to_string(config_.in_channels) + " x " +
                      std::to_string(config_.image_size) + " x " + std::to_string(config_.image_size) + ", got " +
                      shape_string(s));
  }
}

template <typename T>
std::vector<Tensor<T>> FullGlow<T>::boundary_pyramid(const Tensor<T>* boundary) const {
  if (!config_.use_boundary || config_.conditioning == ConditioningMode::unconditional) return {};
  if (!boundary) throw ConfigError("model is configured with use_boundary but no boundary map was given");
  const Shape& s = boundary->shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != config_.image_size || s[3] != config_.image_size) {
    throw ConfigError("boundary map must be N x 1 x image_size x image_size, got " + shape_string(s));
  }
  const std::size_t n = s[0], size = s[2];
  std::vector<Tensor<T>> out;
  for (std::size_t b = 0; b < config_.n_blocks; ++b) {
    const std::size_t factor = std::size_t{2} << b;
    const std::size_t small = size / factor;
    Tensor<T> level(Shape{n, 1, small, small});
    for (std::size_t i = 0; i < n; ++i) {
      Grid<double> grid(size, size);
      for (std::size_t k = 0; k < size * size; ++k) grid.data[k] = (*boundary)[i * size * size + k];
      const Grid<double> down = downsample_boundary(grid, factor, config_.boundary_mode);
      for (std::size_t k = 0; k < small * small; ++k) level[i * small * small + k] = static_cast<T>(down.data[k]);
    }
    out.push_back(std::move(level));
  }
  return out;
}

template <typename T>
StepActivations<T> FullGlow<T>::stack_segment(bool target, std::size_t index, StackState<T>& state,
                                              const StepCondition<T>& cond, bool initialize,
                                              std::vector<Var<T>>* latents) {
  const std::size_t b = block_of(index), k = step_of(index);
  if (k == 0) state.h = ops::squeeze2(state.h);
  StepResult<T> r = step(target, index).forward(state.h, cond, initialize);
  state.h = r.y;
  state.logp = ops::add(state.logp, r.logdet);
  if (k + 1 == config_.n_flows) {
    if (b + 1 < config_.n_blocks) {
      SplitOutput<T> s = split_forward(state.h);
      state.h = s.kept;
      state.logp = ops::add(state.logp, s.logp);
      if (latents) latents->push_back(s.latent);
    } else {
      state.logp = ops::add(state.logp, ops::gaussian_logp(state.h));
      if (latents) latents->push_back(state.h);
    }
  }
  return r.activations;
}

template <typename T>
void FullGlow<T>::stack_segment_inverse(bool target, std::size_t index, Var<T>& h, const std::vector<Var<T>>& latents,
                                        const StepCondition<T>& cond) {
  const std::size_t b = block_of(index), k = step_of(index);
  if (k + 1 == config_.n_flows) {
    h = b + 1 < config_.n_blocks ? split_inverse(h, &latents[b], 0.0, nullptr) : latents[b];
  }
  h = step(target, index).inverse(h, cond);
  if (k == 0) h = ops::unsqueeze2(h);
}

template <typename T>
void FullGlow<T>::joint_segment(std::size_t index, JointState<T>& state, const std::vector<Tensor<T>>& boundary,
                                bool initialize) {
  Tape<T>& tape = state.source.h.tape();
  Var<T> bnd;
  if (!boundary.empty()) bnd = tape.constant(boundary[block_of(index)]);
  const StepActivations<T> src = stack_segment(false, index, state.source, {}, initialize, nullptr);
  StepCondition<T> cond;
  if (config_.conditioning != ConditioningMode::unconditional) cond.source = &src;
  if (bnd.valid()) cond.boundary = &bnd;
  stack_segment(true, index, state.target, cond, initialize, nullptr);
}

template <typename T>
Var<T> FullGlow<T>::objective(const JointState<T>& state, double lambda) const {
  Var<T> per_sample = ops::sub(ops::scale(state.source.logp, static_cast<T>(-lambda)), state.target.logp);
  return ops::mean(per_sample);
}

template <typename T>
JointState<T> FullGlow<T>::initial_state(Tape<T>& tape, const Tensor<T>& x_a, const Tensor<T>& x_b) const {
  check_image(x_a.shape(), "source image");
  check_image(x_b.shape(), "target image");
  if (x_a.dim(0) != x_b.dim(0)) throw ConfigError("source and target batches differ in size");
  const Tensor<T> zeros(Shape{x_a.dim(0)});
  return {{tape.constant(x_a), tape.constant(zeros)}, {tape.constant(x_b), tape.constant(zeros)}};
}

template <typename T>
void FullGlow<T>::initialize(const Tensor<T>& x_a, const Tensor<T>& x_b, const Tensor<T>* boundary) {
  Tape<T> tape(false);
  JointState<T> state = initial_state(tape, x_a, x_b);
  const auto bnd = boundary_pyramid(boundary);
  for (std::size_t i = 0; i < segment_count(); ++i) joint_segment(i, state, bnd, true);
  initialized_ = true;
}

template <typename T>
typename FullGlow<T>::SourcePass FullGlow<T>::source_forward(Var<T> x_a, const Tensor<T>* boundary) {
  check_image(x_a.shape(), "source image");
  Tape<T>& tape = x_a.tape();
  SourcePass pass;
  for (auto& level : boundary_pyramid(boundary)) pass.cache.boundary.push_back(tape.constant(std::move(level)));
  StackState<T> state{x_a, tape.constant(Tensor<T>(Shape{x_a.shape()[0]}))};
  for (std::size_t i = 0; i < segment_count(); ++i) {
    pass.cache.steps.push_back(stack_segment(false, i, state, {}, false, &pass.latents));
  }
  pass.logp = state.logp;
  return pass;
}

template <typename T>
typename FullGlow<T>::TargetPass FullGlow<T>::target_forward(Var<T> x_b, const ActivationCache<T>& cache) {
  check_image(x_b.shape(), "target image");
  const bool conditional = config_.conditioning != ConditioningMode::unconditional;
  if (conditional && cache.steps.size() != segment_count()) {
    throw ConfigError("activation cache has " + std::to_string(cache.steps.size()) + " steps, model has " +
                      std::to_string(segment_count()));
  }
  Tape<T>& tape = x_b.tape();
  TargetPass pass;
  StackState<T> state{x_b, tape.constant(Tensor<T>(Shape{x_b.shape()[0]}))};
  for (std::size_t i = 0; i < segment_count(); ++i) {
    StepCondition<T> cond;
    if (conditional) cond.source = &cache.steps[i];
    if (!cache.boundary.empty() && conditional) cond.boundary = &cache.boundary.at(block_of(i));
    stack_segment(true, i, state, cond, false, &pass.latents);
  }
  pass.logp = state.logp;
  return pass;
}

template <typename T>
Var<T> FullGlow<T>::target_inverse(const std::vector<Var<T>>& latents, const ActivationCache<T>& cache) {
  if (latents.empty()) throw UsageError("target_inverse: empty latent pyramid");
  const auto shapes = pyramid_shapes(latents.front().shape()[0]);
  if (latents.size() != shapes.size()) throw UsageError("target_inverse: pyramid has the wrong number of chunks");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (latents[i].shape() != shapes[i]) {
      throw UsageError("target_inverse: chunk " + std::to_string(i) + " is " + shape_string(latents[i].shape()) +
                       ", expected " + shape_string(shapes[i]));
    }
  }
  const bool conditional = config_.conditioning != ConditioningMode::unconditional;
  if (conditional && cache.steps.size() != segment_count()) throw ConfigError("activation cache size mismatch");
  Var<T> h;
  for (std::size_t i = segment_count(); i-- > 0;) {
    StepCondition<T> cond;
    if (conditional) cond.source = &cache.steps[i];
    if (!cache.boundary.empty() && conditional) cond.boundary = &cache.boundary.at(block_of(i));
    stack_segment_inverse(true, i, h, latents, cond);
  }
  return h;
}

template <typename T>
Var<T> FullGlow<T>::source_inverse(const std::vector<Var<T>>& latents) {
  const auto shapes = latents.empty() ? std::vector<Shape>{} : pyramid_shapes(latents.front().shape()[0]);
  if (latents.empty() || latents.size() != shapes.size()) throw UsageError("source_inverse: bad latent pyramid");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (latents[i].shape() != shapes[i]) throw UsageError("source_inverse: chunk shape mismatch");
  }
  Var<T> h;
  for (std::size_t i = segment_count(); i-- > 0;) stack_segment_inverse(false, i, h, latents, {});
  return h;
}

namespace {

template <typename T>
LatentPyramid<T> values_of(const std::vector<Var<T>>& latents) {
  LatentPyramid<T> z;
  for (const auto& v : latents) z.chunks.push_back(v.value());
  return z;
}

template <typename T>
std::vector<Var<T>> constants_of(Tape<T>& tape, const LatentPyramid<T>& z) {
  std::vector<Var<T>> out;
  for (const auto& c : z.chunks) out.push_back(tape.constant(c));
  return out;
}

}  // namespace

template <typename T>
SourceEncoding<T> FullGlow<T>::source_forward(const Tensor<T>& x_a, const Tensor<T>* boundary) {
  Tape<T> tape(false);
  SourcePass pass = source_forward(tape.constant(x_a), boundary);
  return {values_of(pass.latents), pass.logp.value(), CachedCondition<T>::capture(pass.cache)};
}

template <typename T>
TargetEncoding<T> FullGlow<T>::target_forward(const Tensor<T>& x_b, const CachedCondition<T>& cached) {
  Tape<T> tape(false);
  const ActivationCache<T> cache = cached.bind(tape);
  TargetPass pass = target_forward(tape.constant(x_b), cache);
  return {values_of(pass.latents), pass.logp.value()};
}

template <typename T>
Tensor<T> FullGlow<T>::target_inverse(const LatentPyramid<T>& z, const CachedCondition<T>& cached) {
  Tape<T> tape(false);
  const ActivationCache<T> cache = cached.bind(tape);
  return target_inverse(constants_of(tape, z), cache).value();
}

template <typename T>
Tensor<T> FullGlow<T>::source_inverse(const LatentPyramid<T>& z) {
  Tape<T> tape(false);
  return source_inverse(constants_of(tape, z)).value();
}

template <typename T>
double FullGlow<T>::loss(const Tensor<T>& x_a, const Tensor<T>& x_b, double lambda, const Tensor<T>* boundary) {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be > 0");
  Tape<T> tape(false);
  JointState<T> state = initial_state(tape, x_a, x_b);
  const auto bnd = boundary_pyramid(boundary);
  for (std::size_t i = 0; i < segment_count(); ++i) joint_segment(i, state, bnd, false);
  const double value = objective(state, lambda).value().item();
  if (!std::isfinite(value)) throw NumericalError("non-finite loss", "objective");
  return value;
}

template <typename T>
double FullGlow<T>::bpd(const Tensor<T>& x_b, const Tensor<T>& x_a, const Tensor<T>* boundary) {
  const SourceEncoding<T> src = source_forward(x_a, boundary);
  const TargetEncoding<T> tgt = target_forward(x_b, src.cache);
  const double dims = static_cast<double>(config_.dims());
  double total = 0.0;
  for (std::size_t n = 0; n < tgt.logp.size(); ++n) total += -static_cast<double>(tgt.logp[n]) / (dims * std::numbers::ln2);
  return total / static_cast<double>(tgt.logp.size());
}

template <typename T>
Tensor<T> FullGlow<T>::sample(const Tensor<T>& x_a, double temperature, std::mt19937_64& rng,
                              const Tensor<T>* boundary) {
  if (temperature < 0.0) throw UsageError("sample: temperature must be >= 0");
  check_image(x_a.shape(), "source image");
  const SourceEncoding<T> src = source_forward(x_a, boundary);
  LatentPyramid<T> z;
  for (const auto& shape : pyramid_shapes(x_a.dim(0))) z.chunks.push_back(sample_normal<T>(shape, temperature, rng));
  return target_inverse(z, src.cache);
}

template <typename T>
Tensor<T> FullGlow<T>::content_transfer(const Tensor<T>& x_a1, const Tensor<T>& x_b1, const Tensor<T>& x_a2,
                                        const Tensor<T>* boundary1, const Tensor<T>* boundary2) {
  if (x_a1.shape() != x_b1.shape() || x_a1.shape() != x_a2.shape()) {
    throw UsageError("content_transfer: all three images must share one shape");
  }
  const TargetEncoding<T> content = target_forward(x_b1, source_forward(x_a1, boundary1).cache);
  return target_inverse(content.z, source_forward(x_a2, boundary2).cache);
}

template <typename T>
std::vector<Parameter<T>*> FullGlow<T>::source_parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& s : source_)
    for (auto* p : s.parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> FullGlow<T>::target_parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& s : target_)
    for (auto* p : s.parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> FullGlow<T>::parameters() {
  auto out = source_parameters();
  for (auto* p : target_parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> FullGlow<T>::buffers() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto* stack : {&source_, &target_})
    for (const auto& s : *stack)
      for (auto& b : s.buffers()) out.push_back(std::move(b));
  return out;
}

template <typename T>
void FullGlow<T>::set_buffer(const std::string& name, const Tensor<T>& value) {
  for (auto* stack : {&source_, &target_})
    for (auto& s : *stack) {
      if (name.rfind(s.name() + ".", 0) == 0) {
        s.set_buffer(name, value);
        return;
      }
    }
  throw FormatError("unknown buffer " + name);
}

template <typename T>
void FullGlow<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template class FlowStep<float>;
template class FlowStep<double>;
template struct CachedCondition<float>;
template struct CachedCondition<double>;
template class FullGlow<float>;
template class FullGlow<double>;

}  // namespace fullglow
