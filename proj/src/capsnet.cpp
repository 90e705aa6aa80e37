#include "capsule/capsnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <fmt/format.h>
#include <json.hpp>

#include "capsule/serialization.hpp"

namespace capsule {

ModelConfig ModelConfig::small_test() {
  ModelConfig c;
  c.input_side = 28;
  c.conv_filters = 8;
  c.conv_kernel = 9;
  c.primary_caps_channels = 4;
  c.primary_caps_dim = 4;
  c.primary_kernel = 9;
  c.primary_stride = 2;
  c.num_classes = 2;
  c.class_caps_dim = 8;
  c.routing_iterations = 3;
  return c;
}

std::size_t ModelConfig::conv_output_side() const {
  if (conv_kernel == 0 || conv_kernel > input_side) return 0;
  return input_side - conv_kernel + 1;
}

std::size_t ModelConfig::primary_output_side() const {
  const auto side = conv_output_side();
  if (side == 0 || primary_kernel == 0 || primary_stride == 0 || primary_kernel > side) return 0;
  return (side - primary_kernel) / primary_stride + 1;
}

std::size_t ModelConfig::primary_capsule_count() const {
  const auto side = primary_output_side();
  return primary_caps_channels * side * side;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t value, const char* name) {
    if (value < 1) throw std::invalid_argument(fmt::format("model.{} must be >= 1", name));
  };
  positive(input_side, "input_side");
  positive(conv_filters, "conv_filters");
  positive(conv_kernel, "conv_kernel");
  positive(primary_caps_channels, "primary_caps_channels");
  positive(primary_caps_dim, "primary_caps_dim");
  positive(primary_kernel, "primary_kernel");
  positive(primary_stride, "primary_stride");
  positive(num_classes, "num_classes");
  positive(class_caps_dim, "class_caps_dim");
  positive(routing_iterations, "routing_iterations");
  if (conv_output_side() == 0) {
    throw std::invalid_argument(fmt::format("model.conv_kernel {} leaves no output on a {} px input",
                                            conv_kernel, input_side));
  }
  if (primary_output_side() == 0) {
    throw std::invalid_argument(fmt::format(
        "model.primary_kernel {} leaves no output on the {} px conv feature map", primary_kernel,
        conv_output_side()));
  }
  if (primary_capsule_count() < num_classes) {
    throw std::invalid_argument(fmt::format("model: {} primary capsules for {} classes",
                                            primary_capsule_count(), num_classes));
  }
}

std::size_t param_count(const ModelConfig& c) {
  const std::size_t primary_channels = c.primary_caps_channels * c.primary_caps_dim;
  return c.conv_filters * c.conv_kernel * c.conv_kernel + c.conv_filters +
         primary_channels * c.conv_filters * c.primary_kernel * c.primary_kernel + primary_channels +
         c.primary_capsule_count() * c.num_classes * c.class_caps_dim * c.primary_caps_dim;
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> data(element_count(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data));
}

} // namespace

std::array<Shape, 5> parameter_shapes(const ModelConfig& config) {
  const std::size_t f = config.conv_filters, k = config.conv_kernel, pk = config.primary_kernel;
  const std::size_t primary_channels = config.primary_caps_channels * config.primary_caps_dim;
  return {Shape{f, 1, k, k}, Shape{f}, Shape{primary_channels, f, pk, pk}, Shape{primary_channels},
          Shape{config.primary_capsule_count(), config.num_classes, config.class_caps_dim,
                config.primary_caps_dim}};
}

CapsNetModel build_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto shapes = parameter_shapes(config);

  CapsNetModel model;
  model.config = config;
  model.conv_kernels = he_normal(shapes[0], config.conv_kernel * config.conv_kernel, rng);
  model.conv_bias = Tensor::zeros(shapes[1]);
  model.primary_kernels = he_normal(
      shapes[2], config.conv_filters * config.primary_kernel * config.primary_kernel, rng);
  model.primary_bias = Tensor::zeros(shapes[3]);
  // Each class-capsule component sums over all N_p * d_u primary inputs.
  model.transforms =
      he_normal(shapes[4], config.primary_capsule_count() * config.primary_caps_dim, rng);
  return model;
}

std::size_t param_count(const CapsNetModel& model) {
  std::size_t n = 0;
  for (const auto* p : model.params()) n += p->size();
  return n;
}

ModelVars bind(Tape& tape, const CapsNetModel& model, bool requires_grad) {
  return {tape.leaf(model.conv_kernels, requires_grad), tape.leaf(model.conv_bias, requires_grad),
          tape.leaf(model.primary_kernels, requires_grad),
          tape.leaf(model.primary_bias, requires_grad), tape.leaf(model.transforms, requires_grad)};
}

std::vector<std::size_t> primary_capsule_layout(std::size_t types, std::size_t dim, std::size_t side) {
  std::vector<std::size_t> source(types * side * side * dim);
  std::size_t j = 0;
  for (std::size_t t = 0; t < types; ++t) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        for (std::size_t k = 0; k < dim; ++k) source[j++] = ((t * dim + k) * side + y) * side + x;
      }
    }
  }
  return source;
}

Var primary_caps_forward(const ModelVars& vars, const ModelConfig& config, const Var& features) {
  const Shape expected{config.conv_filters, config.conv_output_side(), config.conv_output_side()};
  if (features.shape() != expected) {
    throw ShapeError(fmt::format("primary_caps_forward: features {} but config expects {}",
                                 to_string(features.shape()), to_string(expected)));
  }
  const Var conv = add_channel_bias(conv2d(features, vars.primary_kernels, config.primary_stride),
                                    vars.primary_bias);
  const std::size_t side = config.primary_output_side();
  const Var caps = gather(conv, primary_capsule_layout(config.primary_caps_channels,
                                                       config.primary_caps_dim, side),
                          {config.primary_capsule_count(), config.primary_caps_dim});
  return squash(caps);
}

RoutingResult routing(const Var& u_hat, std::size_t iterations) {
  if (iterations < 1) throw std::invalid_argument("routing: iterations must be >= 1");
  if (u_hat.shape().size() != 3) {
    throw ShapeError(fmt::format("routing: predictions must be [N,K,D], got {}",
                                 to_string(u_hat.shape())));
  }
  Tape& tape = *u_hat.tape();
  const std::size_t n = u_hat.shape()[0], classes = u_hat.shape()[1];

  RoutingResult result;
  Var logits = tape.constant(Tensor::zeros({n, classes}));
  for (std::size_t it = 0; it < iterations; ++it) {
    result.c = softmax_axis(logits, 1);
    result.coupling_history.push_back(result.c.value());
    result.v = squash(weighted_sum(result.c, u_hat));
    if (it + 1 < iterations) logits = add(logits, agreement(u_hat, result.v));
  }
  return result;
}

ForwardResult forward(const ModelVars& vars, const ModelConfig& config, const Tensor& image) {
  const Shape expected{1, config.input_side, config.input_side};
  if (image.shape() != expected) {
    throw ShapeError(fmt::format("forward: image {} but model expects {}", to_string(image.shape()),
                                 to_string(expected)));
  }
  Tape& tape = *vars.conv_kernels.tape();
  const Var input = tape.constant(image);
  const Var features = relu(add_channel_bias(conv2d(input, vars.conv_kernels, 1), vars.conv_bias));
  const Var primary = primary_caps_forward(vars, config, features);
  const Var u_hat = capsule_transform(vars.transforms, primary);

  ForwardResult out;
  out.routing = routing(u_hat, config.routing_iterations);
  out.class_caps = out.routing.v;
  out.probs = clamp(norm_last_axis(out.routing.v), kProbClamp, 1.0 - kProbClamp);
  return out;
}

Tensor predict(const CapsNetModel& model, const Tensor& image) {
  Tape tape;
  const ModelVars vars = bind(tape, model, false);
  return forward(vars, model.config, image).probs.value();
}

Tensor one_hot(std::size_t label, std::size_t classes) {
  if (label >= classes) {
    throw std::invalid_argument(fmt::format("label {} out of range for {} classes", label, classes));
  }
  std::vector<double> data(classes, 0.0);
  data[label] = 1.0;
  return Tensor::from({classes}, std::move(data));
}

Var bce_loss(const Var& probs, const Tensor& target) {
  if (probs.shape() != target.shape()) {
    throw ShapeError(fmt::format("bce_loss: probabilities {} vs target {}", to_string(probs.shape()),
                                 to_string(target.shape())));
  }
  Tape& tape = *probs.tape();
  std::vector<double> complement(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) complement[i] = 1.0 - target[i];
  const Var t = tape.constant(target);
  const Var t_c = tape.constant(Tensor::from(target.shape(), std::move(complement)));
  const Var log_p = log(probs);
  const Var log_q = log(add_scalar(scale(probs, -1.0), 1.0));
  const Var terms = add(mul(t, log_p), mul(t_c, log_q));
  return scale(sum(terms), -1.0 / static_cast<double>(target.size()));
}

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
T byteswap(T value) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <typename T>
void write_le(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::big) value = byteswap(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(value));
}

template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(value));
  if constexpr (std::endian::native == std::endian::big) value = byteswap(value);
  return value;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const CapsNetModel& model,
                     const std::vector<std::string>& class_names) {
  nlohmann::json header;
  header["config"] = model_config_to_json(model.config);
  header["class_names"] = class_names;
  header["tensors"] = nlohmann::json::array();
  const auto params = model.params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    header["tensors"].push_back({{"name", kParamNames[p]}, {"shape", params[p]->shape()}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot open checkpoint {} for writing", path.string()));
  out.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* p : params) {
    for (double v : p->data()) write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error(fmt::format("failed writing checkpoint {}", path.string()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open checkpoint {}", path.string()));
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(fmt::format("{} is not a capsule checkpoint", path.string()));
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error(fmt::format("{}: unsupported checkpoint version {}", path.string(), version));
  }
  const auto header_size = read_le<std::uint64_t>(in);
  std::string text(header_size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw std::runtime_error(fmt::format("{}: truncated header", path.string()));
  const auto header = nlohmann::json::parse(text);

  Checkpoint ckpt;
  ckpt.model.config = model_config_from_json(header.at("config"));
  ckpt.class_names = header.at("class_names").get<std::vector<std::string>>();
  const auto& tensors = header.at("tensors");
  auto params = ckpt.model.params();
  if (tensors.size() != params.size()) {
    throw std::runtime_error(fmt::format("{}: expected {} tensors, found {}", path.string(),
                                         params.size(), tensors.size()));
  }
  ckpt.model.config.validate();
  const auto expected_shapes = parameter_shapes(ckpt.model.config);
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (tensors[p].at("name").get<std::string>() != kParamNames[p]) {
      throw std::runtime_error(fmt::format("{}: tensor {} is named {}, expected {}", path.string(), p,
                                           tensors[p].at("name").get<std::string>(), kParamNames[p]));
    }
    Shape shape = tensors[p].at("shape").get<Shape>();
    if (shape != expected_shapes[p]) {
      throw std::runtime_error(fmt::format("{}: tensor {} has shape {} but config implies {}",
                                           path.string(), kParamNames[p], to_string(shape),
                                           to_string(expected_shapes[p])));
    }
    std::vector<double> data(element_count(shape));
    for (auto& v : data) v = std::bit_cast<double>(read_le<std::uint64_t>(in));
    if (!in) throw std::runtime_error(fmt::format("{}: truncated tensor data", path.string()));
    *params[p] = Tensor::from(std::move(shape), std::move(data));
  }
  return ckpt;
}

} // namespace capsule
