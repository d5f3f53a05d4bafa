#pragma once

#include <png.h>

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "splatpatch/camera.hpp"
#include "splatpatch/error.hpp"
#include "splatpatch/gaussians.hpp"
#include "splatpatch/geometry.hpp"
#include "splatpatch/image.hpp"
#include "splatpatch/network.hpp"

namespace splatpatch {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;

namespace detail {

inline std::vector<char> read_file(const fs::path& path) {
  require(fs::exists(path), ErrorKind::MissingFile, path.string() + ": file not found");
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::IoError, path.string() + ": cannot open for reading");
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

/// Writes through a temporary file and renames it into place.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::IoError, tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::IoError, tmp.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  require(!ec, ErrorKind::IoError, path.string() + ": rename failed: " + ec.message());
}

inline std::string lower_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline std::string exact(double v) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return s.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PLY

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

namespace detail {

inline bool parse_ply_type(const std::string& name, PlyType& out) {
  static const std::pair<const char*, PlyType> table[] = {
      {"char", PlyType::Int8},     {"int8", PlyType::Int8},       {"uchar", PlyType::UInt8},
      {"uint8", PlyType::UInt8},   {"short", PlyType::Int16},     {"int16", PlyType::Int16},
      {"ushort", PlyType::UInt16}, {"uint16", PlyType::UInt16},   {"int", PlyType::Int32},
      {"int32", PlyType::Int32},   {"uint", PlyType::UInt32},     {"uint32", PlyType::UInt32},
      {"float", PlyType::Float32}, {"float32", PlyType::Float32}, {"double", PlyType::Float64},
      {"float64", PlyType::Float64}};
  for (const auto& [n, t] : table)
    if (name == n) {
      out = t;
      return true;
    }
  return false;
}

inline std::size_t ply_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8: return 1;
    case PlyType::Int16:
    case PlyType::UInt16: return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32: return 4;
    case PlyType::Float64: return 8;
  }
  return 0;
}

template <typename V>
V load_le(const char* p) {
  V v;
  std::memcpy(&v, p, sizeof(V));
  return v;
}

inline double decode_ply(PlyType t, const char* p) {
  switch (t) {
    case PlyType::Int8: return load_le<std::int8_t>(p);
    case PlyType::UInt8: return load_le<std::uint8_t>(p);
    case PlyType::Int16: return load_le<std::int16_t>(p);
    case PlyType::UInt16: return load_le<std::uint16_t>(p);
    case PlyType::Int32: return load_le<std::int32_t>(p);
    case PlyType::UInt32: return load_le<std::uint32_t>(p);
    case PlyType::Float32: return load_le<float>(p);
    case PlyType::Float64: return load_le<double>(p);
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  PlyType type;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

}  // namespace detail

/// Reads x,y,z and red,green,blue (plus optional nx,ny,nz) from the vertex
/// element of an ASCII or binary little-endian PLY file.
inline PointCloud read_ply(const fs::path& path) {
  const std::vector<char> data = detail::read_file(path);
  const std::string where = path.string();
  std::size_t pos = 0;
  int line_no = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= data.size()) return false;
    const auto* begin = data.data() + pos;
    const auto* nl = static_cast<const char*>(std::memchr(begin, '\n', data.size() - pos));
    const std::size_t len = nl ? static_cast<std::size_t>(nl - begin) : data.size() - pos;
    line.assign(begin, len);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pos += len + (nl ? 1 : 0);
    ++line_no;
    return true;
  };
  auto header_error = [&](const std::string& msg) {
    fail(ErrorKind::FormatError, where + ":" + std::to_string(line_no) + ": " + msg);
  };

  std::string line;
  if (!next_line(line) || line != "ply") header_error("missing 'ply' signature");
  bool binary = false, have_format = false;
  std::vector<detail::PlyElement> elements;
  for (;;) {
    if (!next_line(line)) header_error("header ends without 'end_header'");
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key.empty() || key == "comment" || key == "obj_info") continue;
    if (key == "end_header") break;
    if (key == "format") {
      std::string fmt, version;
      ls >> fmt >> version;
      if (fmt == "ascii")
        binary = false;
      else if (fmt == "binary_little_endian")
        binary = true;
      else
        header_error("unsupported format '" + fmt + "'");
      have_format = true;
    } else if (key == "element") {
      detail::PlyElement e;
      long long count = -1;
      ls >> e.name >> count;
      if (e.name.empty() || count < 0 || ls.fail()) header_error("malformed element line");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (key == "property") {
      if (elements.empty()) header_error("property before any element");
      detail::PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type >> p.name;
        p.is_list = true;
        if (!detail::parse_ply_type(count_type, p.count_type) || !detail::parse_ply_type(item_type, p.type))
          header_error("unknown list property type");
      } else {
        ls >> p.name;
        if (!detail::parse_ply_type(type, p.type)) header_error("unknown property type '" + type + "'");
      }
      if (p.name.empty()) header_error("property without a name");
      elements.back().props.push_back(p);
    } else {
      header_error("unexpected header keyword '" + key + "'");
    }
  }
  if (!have_format) header_error("missing format line");

  const detail::PlyElement* vertex = nullptr;
  std::size_t vertex_slot = 0;
  for (std::size_t e = 0; e < elements.size(); ++e)
    if (elements[e].name == "vertex") {
      vertex = &elements[e];
      vertex_slot = e;
      break;
    }
  require(vertex != nullptr, ErrorKind::FormatError, where + ": no vertex element");
  auto find = [&](const char* name) -> int {
    for (std::size_t i = 0; i < vertex->props.size(); ++i)
      if (vertex->props[i].name == name) {
        require(!vertex->props[i].is_list, ErrorKind::FormatError,
                where + ": vertex property '" + name + "' is a list");
        return static_cast<int>(i);
      }
    return -1;
  };
  const char* required[] = {"x", "y", "z", "red", "green", "blue"};
  int idx[6];
  for (int i = 0; i < 6; ++i) {
    idx[i] = find(required[i]);
    require(idx[i] >= 0, ErrorKind::FormatError, where + ": missing vertex property '" + required[i] + "'");
  }
  const int nidx[3] = {find("nx"), find("ny"), find("nz")};
  const bool has_normals = nidx[0] >= 0 && nidx[1] >= 0 && nidx[2] >= 0;
  const auto color_divisor = [&](int prop) {
    const PlyType t = vertex->props[prop].type;
    return (t == PlyType::Float32 || t == PlyType::Float64) ? 1.0 : 255.0;
  };

  PointCloud cloud;
  cloud.positions.resize(vertex->count);
  cloud.colors.resize(vertex->count);
  if (has_normals) cloud.normals.emplace(vertex->count);
  std::vector<double> values(vertex->props.size());
  auto store = [&](std::size_t i) {
    cloud.positions[i] = {values[idx[0]], values[idx[1]], values[idx[2]]};
    cloud.colors[i] = {values[idx[3]] / color_divisor(idx[3]), values[idx[4]] / color_divisor(idx[4]),
                       values[idx[5]] / color_divisor(idx[5])};
    if (has_normals) {
      Vec3d n(values[nidx[0]], values[nidx[1]], values[nidx[2]]);
      const double len = n.norm();
      require(len > 0 && std::isfinite(len), ErrorKind::FormatError,
              where + ": vertex " + std::to_string(i) + " has a zero normal");
      // Unit normals are kept as written so a round trip is exact.
      (*cloud.normals)[i] = std::abs(len - 1) <= 1e-12 ? n : Vec3d(n / len);
    }
  };

  if (!binary) {
    for (std::size_t e = 0; e < elements.size(); ++e) {
      for (std::size_t i = 0; i < elements[e].count; ++i) {
        if (!next_line(line)) fail(ErrorKind::UnexpectedEof, where + ": file ends inside element data");
        if (e != vertex_slot) continue;
        std::istringstream ls(line);
        for (std::size_t p = 0; p < values.size(); ++p) {
          if (vertex->props[p].is_list) {
            std::size_t n = 0;
            ls >> n;
            for (std::size_t k = 0; k < n; ++k) ls >> values[p];
          } else {
            ls >> values[p];
          }
        }
        require(!ls.fail(), ErrorKind::FormatError,
                where + ":" + std::to_string(line_no) + ": malformed vertex line");
        store(i);
      }
      if (e == vertex_slot) break;
    }
  } else {
    const auto need = [&](std::size_t n) {
      require(pos + n <= data.size(), ErrorKind::UnexpectedEof, where + ": file ends inside element data");
    };
    for (std::size_t e = 0; e < elements.size(); ++e) {
      for (std::size_t i = 0; i < elements[e].count; ++i) {
        for (std::size_t p = 0; p < elements[e].props.size(); ++p) {
          const auto& prop = elements[e].props[p];
          if (prop.is_list) {
            need(detail::ply_size(prop.count_type));
            const auto n = static_cast<std::size_t>(detail::decode_ply(prop.count_type, data.data() + pos));
            pos += detail::ply_size(prop.count_type);
            need(n * detail::ply_size(prop.type));
            pos += n * detail::ply_size(prop.type);
          } else {
            need(detail::ply_size(prop.type));
            if (e == vertex_slot) values[p] = detail::decode_ply(prop.type, data.data() + pos);
            pos += detail::ply_size(prop.type);
          }
        }
        if (e == vertex_slot) store(i);
      }
      if (e == vertex_slot) break;
    }
  }
  cloud.validate();
  return cloud;
}

struct PlyWriteOptions {
  bool ascii = false;
};

/// Positions and normals are stored as doubles so a round trip is exact;
/// colors are quantized to bytes with round-half-up.
inline void write_ply(const PointCloud& cloud, const fs::path& path, const PlyWriteOptions& opts = {}) {
  cloud.validate();
  const bool normals = cloud.has_normals();
  std::ostringstream out;
  out << "ply\nformat " << (opts.ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  out << "element vertex " << cloud.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  if (normals) out << "property double nx\nproperty double ny\nproperty double nz\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  auto byte = [](double v) {
    return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    double v[6];
    int nv = 3;
    for (int k = 0; k < 3; ++k) v[k] = cloud.positions[i][k];
    if (normals) {
      for (int k = 0; k < 3; ++k) v[3 + k] = (*cloud.normals)[i][k];
      nv = 6;
    }
    std::uint8_t c[3] = {byte(cloud.colors[i].x()), byte(cloud.colors[i].y()), byte(cloud.colors[i].z())};
    if (opts.ascii) {
      for (int k = 0; k < nv; ++k) out << detail::exact(v[k]) << ' ';
      out << int(c[0]) << ' ' << int(c[1]) << ' ' << int(c[2]) << '\n';
    } else {
      out.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(nv * sizeof(double)));
      out.write(reinterpret_cast<const char*>(c), 3);
    }
  }
  detail::write_file_atomic(path, out.str());
}

// ---------------------------------------------------------------------------
// Images

inline std::uint8_t quantize_channel(double v) {
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

namespace detail {

template <typename T>
ImageBuffer<T> from_bytes(int w, int h, const unsigned char* bytes) {
  ImageBuffer<T> img(w, h);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<T>(bytes[i] / 255.0);
  return img;
}

template <typename T>
std::vector<unsigned char> to_bytes(const ImageBuffer<T>& img) {
  std::vector<unsigned char> bytes(img.rgb.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_channel(double(img.rgb[i]));
  return bytes;
}

template <typename T>
ImageBuffer<T> read_ppm(const fs::path& path, const std::vector<char>& data) {
  const std::string where = path.string();
  std::size_t pos = 0;
  auto skip_space = [&] {
    for (;;) {
      while (pos < data.size() && std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
      if (pos < data.size() && data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else {
        return;
      }
    }
  };
  auto read_int = [&]() {
    skip_space();
    long long v = 0;
    bool any = false;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
      v = v * 10 + (data[pos++] - '0');
      any = true;
      require(v < (1LL << 31), ErrorKind::FormatError, where + ": header value out of range");
    }
    require(any, ErrorKind::FormatError, where + ": malformed PPM header");
    return static_cast<int>(v);
  };
  require(data.size() >= 2 && data[0] == 'P' && (data[1] == '6' || data[1] == '3'), ErrorKind::FormatError,
          where + ": not a P3/P6 PPM file");
  const bool ascii = data[1] == '3';
  pos = 2;
  const int w = read_int(), h = read_int(), maxval = read_int();
  require(w > 0 && h > 0, ErrorKind::FormatError, where + ": image size must be positive");
  require(maxval == 255, ErrorKind::FormatError,
          where + ": unsupported bit depth (maxval " + std::to_string(maxval) + ", need 255)");
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  std::vector<unsigned char> bytes(n);
  if (ascii) {
    for (std::size_t i = 0; i < n; ++i) {
      if (pos >= data.size()) fail(ErrorKind::UnexpectedEof, where + ": pixel data truncated");
      const int v = read_int();
      require(v <= 255, ErrorKind::FormatError, where + ": sample exceeds maxval");
      bytes[i] = static_cast<unsigned char>(v);
    }
  } else {
    ++pos;  // single whitespace byte after maxval
    require(pos + n <= data.size(), ErrorKind::UnexpectedEof, where + ": pixel data truncated");
    std::memcpy(bytes.data(), data.data() + pos, n);
  }
  return from_bytes<T>(w, h, bytes.data());
}

template <typename T>
ImageBuffer<T> read_png(const fs::path& path, const std::vector<char>& data) {
  const std::string where = path.string();
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  require(data.size() >= 33 && std::memcmp(data.data(), sig, 8) == 0 && std::memcmp(data.data() + 12, "IHDR", 4) == 0,
          ErrorKind::FormatError, where + ": not a PNG file");
  const auto* u = reinterpret_cast<const unsigned char*>(data.data());
  const int bit_depth = u[24], color_type = u[25], interlace = u[28];
  require(bit_depth == 8, ErrorKind::FormatError,
          where + ": unsupported bit depth " + std::to_string(bit_depth) + " (need 8)");
  require(color_type == 2, ErrorKind::FormatError,
          where + ": unsupported color type " + std::to_string(color_type) + " (need RGB)");
  require(interlace == 0, ErrorKind::FormatError, where + ": interlaced PNG is not supported");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_memory(&image, data.data(), data.size()) != 0, ErrorKind::FormatError,
          where + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr) == 0) {
    const std::string msg = image.message;
    png_image_free(&image);
    fail(ErrorKind::FormatError, where + ": " + msg);
  }
  return from_bytes<T>(static_cast<int>(image.width), static_cast<int>(image.height), bytes.data());
}

}  // namespace detail

/// Reads an 8-bit RGB PNG or PPM (chosen by signature) into [0,1] channels.
template <typename T = float>
ImageBuffer<T> read_image(const fs::path& path) {
  const auto data = detail::read_file(path);
  if (data.size() >= 4 && static_cast<unsigned char>(data[0]) == 0x89 && data[1] == 'P' && data[2] == 'N')
    return detail::read_png<T>(path, data);
  return detail::read_ppm<T>(path, data);
}

/// Writes PNG for a .png extension and binary PPM otherwise.
template <typename T>
void write_image(const ImageBuffer<T>& img, const fs::path& path) {
  require(img.width > 0 && img.height > 0, ErrorKind::InvalidArgument, "cannot write an empty image");
  const auto bytes = detail::to_bytes(img);
  if (detail::lower_extension(path) == ".png") {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    require(png_image_write_get_memory_size(image, size, 0, bytes.data(), 0, nullptr) != 0, ErrorKind::IoError,
            path.string() + ": " + image.message);
    std::string buffer(size, '\0');
    require(png_image_write_to_memory(&image, buffer.data(), &size, 0, bytes.data(), 0, nullptr) != 0,
            ErrorKind::IoError, path.string() + ": " + image.message);
    buffer.resize(size);
    detail::write_file_atomic(path, buffer);
    return;
  }
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  detail::write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Scene manifests

struct ManifestView {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix4d extrinsics = Eigen::Matrix4d::Identity();
  fs::path image;  // resolved against the manifest directory on load
};

struct SceneManifest {
  fs::path cloud;
  Vec3d background = Vec3d::Ones();
  int width = 0;
  int height = 0;
  std::vector<ManifestView> views;

  Camera camera(std::size_t i) const {
    Camera c;
    c.intrinsics = views.at(i).intrinsics;
    c.extrinsics = views.at(i).extrinsics;
    c.width = width;
    c.height = height;
    return c;
  }

  std::vector<Camera> cameras() const {
    std::vector<Camera> out;
    for (std::size_t i = 0; i < views.size(); ++i) out.push_back(camera(i));
    return out;
  }
};

inline constexpr const char* kManifestHeader = "splatpatch-manifest 1";

/// Line-oriented text: a header line, then "key values..." lines. Paths are
/// relative to the manifest's directory.
inline SceneManifest load_manifest(const fs::path& path) {
  const auto data = detail::read_file(path);
  const std::string where = path.string();
  const fs::path base = path.parent_path();
  std::istringstream in(std::string(data.begin(), data.end()));
  SceneManifest m;
  std::string line;
  int line_no = 0;
  bool header = false, have_cloud = false, have_res = false;
  long long declared_views = -1;
  auto err = [&](ErrorKind kind, const std::string& msg) {
    fail(kind, where + ":" + std::to_string(line_no) + ": " + msg);
  };
  auto view_tag = [&] { return "view " + std::to_string(m.views.size() - 1); };
  std::vector<std::array<bool, 3>> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    if (!header) {
      if (line != kManifestHeader) err(ErrorKind::FormatError, "expected '" + std::string(kManifestHeader) + "'");
      header = true;
      continue;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    std::vector<double> nums;
    auto numbers = [&] {
      nums.clear();
      std::string tok;
      while (ls >> tok) {
        try {
          std::size_t used = 0;
          nums.push_back(std::stod(tok, &used));
          if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
          err(ErrorKind::FormatError, "'" + key + "' has non-numeric value '" + tok + "'");
        }
      }
    };
    auto rest = [&] {
      std::string r;
      std::getline(ls >> std::ws, r);
      return r;
    };
    if (key == "cloud") {
      const std::string p = rest();
      if (p.empty()) err(ErrorKind::FormatError, "cloud path missing");
      m.cloud = base / p;
      have_cloud = true;
    } else if (key == "background") {
      numbers();
      if (nums.size() != 3) err(ErrorKind::ShapeError, "background needs 3 values");
      m.background = {nums[0], nums[1], nums[2]};
      if (m.background.minCoeff() < 0 || m.background.maxCoeff() > 1)
        err(ErrorKind::FormatError, "background outside [0,1]");
    } else if (key == "resolution") {
      numbers();
      if (nums.size() != 2 || nums[0] < 1 || nums[1] < 1 || nums[0] != std::floor(nums[0]) ||
          nums[1] != std::floor(nums[1]))
        err(ErrorKind::ShapeError, "resolution needs two positive integers");
      m.width = static_cast<int>(nums[0]);
      m.height = static_cast<int>(nums[1]);
      have_res = true;
    } else if (key == "views") {
      numbers();
      if (nums.size() != 1 || nums[0] < 1) err(ErrorKind::FormatError, "views needs a positive count");
      declared_views = static_cast<long long>(nums[0]);
    } else if (key == "view") {
      numbers();
      if (nums.size() != 1 || nums[0] != double(m.views.size()))
        err(ErrorKind::FormatError, "views must be numbered consecutively from 0");
      m.views.emplace_back();
      seen.push_back({false, false, false});
    } else if (key == "intrinsics" || key == "extrinsics" || key == "image") {
      if (m.views.empty()) err(ErrorKind::FormatError, "'" + key + "' before any 'view' line");
      auto& v = m.views.back();
      if (key == "image") {
        const std::string p = rest();
        if (p.empty()) err(ErrorKind::FormatError, view_tag() + ": image path missing");
        v.image = base / p;
        seen.back()[2] = true;
        continue;
      }
      numbers();
      if (key == "intrinsics") {
        if (nums.size() != 9)
          err(ErrorKind::ShapeError, view_tag() + ": intrinsics has " + std::to_string(nums.size()) +
                                         " values, expected 9 (3x3)");
        for (int i = 0; i < 9; ++i) v.intrinsics(i / 3, i % 3) = nums[i];
        seen.back()[0] = true;
      } else {
        if (nums.size() != 16)
          err(ErrorKind::ShapeError, view_tag() + ": extrinsics has " + std::to_string(nums.size()) +
                                         " values, expected 16 (4x4)");
        for (int i = 0; i < 16; ++i) v.extrinsics(i / 4, i % 4) = nums[i];
        seen.back()[1] = true;
      }
    } else {
      err(ErrorKind::FormatError, "unknown key '" + key + "'");
    }
  }
  require(header, ErrorKind::FormatError, where + ": empty manifest");
  require(have_cloud, ErrorKind::FormatError, where + ": missing 'cloud' line");
  require(have_res, ErrorKind::FormatError, where + ": missing 'resolution' line");
  require(!m.views.empty(), ErrorKind::FormatError, where + ": manifest has no views");
  require(declared_views < 0 || declared_views == static_cast<long long>(m.views.size()), ErrorKind::FormatError,
          where + ": declares " + std::to_string(declared_views) + " views but lists " +
              std::to_string(m.views.size()));
  require(fs::exists(m.cloud), ErrorKind::MissingFile, where + ": cloud file not found: " + m.cloud.string());
  for (std::size_t i = 0; i < m.views.size(); ++i) {
    const std::string tag = where + ": view " + std::to_string(i);
    require(seen[i][0] && seen[i][1] && seen[i][2], ErrorKind::FormatError,
            tag + ": needs intrinsics, extrinsics and image");
    require(m.views[i].extrinsics.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1)), ErrorKind::ShapeError,
            tag + ": extrinsics last row must be 0 0 0 1");
    require(m.views[i].intrinsics.row(2).isApprox(Eigen::RowVector3d(0, 0, 1)), ErrorKind::ShapeError,
            tag + ": intrinsics last row must be 0 0 1");
    try {
      m.camera(i).validate();
    } catch (const Error& e) {
      fail(ErrorKind::FormatError, tag + ": " + e.what());
    }
    require(fs::exists(m.views[i].image), ErrorKind::MissingFile,
            tag + ": image not found: " + m.views[i].image.string());
  }
  return m;
}

/// Writes the manifest; paths are stored relative to the manifest directory.
inline void save_manifest(const SceneManifest& m, const fs::path& path) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  auto rel = [&](const fs::path& p) {
    const fs::path r = fs::absolute(p).lexically_proximate(fs::absolute(base));
    return r.generic_string();
  };
  std::ostringstream out;
  out << kManifestHeader << "\n";
  out << "cloud " << rel(m.cloud) << "\n";
  out << "background " << detail::exact(m.background.x()) << ' ' << detail::exact(m.background.y()) << ' '
      << detail::exact(m.background.z()) << "\n";
  out << "resolution " << m.width << ' ' << m.height << "\n";
  out << "views " << m.views.size() << "\n";
  for (std::size_t i = 0; i < m.views.size(); ++i) {
    const auto& v = m.views[i];
    out << "view " << i << "\nintrinsics";
    for (int k = 0; k < 9; ++k) out << ' ' << detail::exact(v.intrinsics(k / 3, k % 3));
    out << "\nextrinsics";
    for (int k = 0; k < 16; ++k) out << ' ' << detail::exact(v.extrinsics(k / 4, k % 4));
    out << "\nimage " << rel(v.image) << "\n";
  }
  detail::write_file_atomic(path, out.str());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little endian):
//   "SPTC" | u32 version | u32 kind | u32 scalar bytes (4 or 8) | payload |
//   u32 rng length | rng bytes | u64 step
// Module payload: architecture, then u32 tensor count and per tensor
// u32 rows, u32 cols, rows*cols scalars in visit_tensors order.
// Gaussian payload: u8 space, u64 count, then positions, scales, opacities,
// SH, normals and angles as contiguous scalar arrays.

inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { Module = 1, Gaussians = 2 };

template <typename T>
struct ModuleCheckpoint {
  ModuleParams<T> params;
  std::string rng_state;
  std::uint64_t step = 0;
  bool operator==(const ModuleCheckpoint&) const = default;
};

template <typename T>
struct GaussianCheckpoint {
  GaussianSet<T> gaussians;
  std::string rng_state;
  std::uint64_t step = 0;
  bool operator==(const GaussianCheckpoint&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    static_assert(std::is_trivially_copyable_v<V>);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& data, std::string where) : data_(data), where_(std::move(where)) {}

  template <typename V>
  V get() {
    V v;
    bytes(&v, sizeof(V));
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    require(n <= data_.size() - pos_, ErrorKind::UnexpectedEof,
            where_ + ": truncated at byte " + std::to_string(data_.size()));
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string string(std::size_t max_len) {
    const auto n = get<std::uint32_t>();
    require(n <= max_len, ErrorKind::FormatError, where_ + ": string length " + std::to_string(n) + " too large");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& where() const { return where_; }

 private:
  const std::vector<char>& data_;
  std::size_t pos_ = 0;
  std::string where_;
};

inline void write_header(ByteWriter& w, CheckpointKind kind, std::uint32_t scalar) {
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kind));
  w.put<std::uint32_t>(scalar);
}

/// Validates the header and returns the stored scalar width.
inline std::uint32_t read_header(ByteReader& r, CheckpointKind expected) {
  char magic[4] = {};
  if (r.remaining() < 4) fail(ErrorKind::UnexpectedEof, r.where() + ": file too short for a checkpoint");
  r.bytes(magic, 4);
  require(std::memcmp(magic, kCheckpointMagic, 4) == 0, ErrorKind::BadMagic, r.where() + ": not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorKind::VersionMismatch,
          r.where() + ": checkpoint version " + std::to_string(version) + ", expected " +
              std::to_string(kCheckpointVersion));
  const auto kind = r.get<std::uint32_t>();
  require(kind == static_cast<std::uint32_t>(expected), ErrorKind::FormatError,
          r.where() + ": checkpoint kind " + std::to_string(kind) + ", expected " +
              std::to_string(static_cast<std::uint32_t>(expected)));
  const auto scalar = r.get<std::uint32_t>();
  require(scalar == 4 || scalar == 8, ErrorKind::FormatError,
          r.where() + ": unsupported scalar width " + std::to_string(scalar));
  return scalar;
}

template <typename T>
void read_scalars(ByteReader& r, std::uint32_t scalar, T* dst, std::size_t n) {
  if (scalar == sizeof(T)) {
    r.bytes(dst, n * sizeof(T));
    return;
  }
  for (std::size_t i = 0; i < n; ++i)
    dst[i] = scalar == 4 ? static_cast<T>(r.get<float>()) : static_cast<T>(r.get<double>());
}

inline void finish(ByteReader& r) {
  require(r.remaining() == 0, ErrorKind::FormatError,
          r.where() + ": " + std::to_string(r.remaining()) + " trailing bytes");
}

inline void write_int_list(ByteWriter& w, const std::vector<int>& v) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.size()));
  for (int x : v) w.put<std::int32_t>(x);
}

inline std::vector<int> read_int_list(ByteReader& r) {
  const auto n = r.get<std::uint32_t>();
  require(n <= 64, ErrorKind::FormatError, r.where() + ": layer list too long");
  std::vector<int> v(n);
  for (auto& x : v) x = r.get<std::int32_t>();
  return v;
}

}  // namespace detail

inline CheckpointKind checkpoint_kind(const fs::path& path) {
  const auto data = detail::read_file(path);
  detail::ByteReader r(data, path.string());
  char magic[4] = {};
  if (r.remaining() < 12) fail(ErrorKind::UnexpectedEof, path.string() + ": file too short for a checkpoint");
  r.bytes(magic, 4);
  require(std::memcmp(magic, kCheckpointMagic, 4) == 0, ErrorKind::BadMagic, path.string() + ": not a checkpoint");
  r.get<std::uint32_t>();
  const auto kind = r.get<std::uint32_t>();
  require(kind == 1 || kind == 2, ErrorKind::FormatError, path.string() + ": unknown checkpoint kind");
  return static_cast<CheckpointKind>(kind);
}

template <typename T>
std::string encode_checkpoint(const ModuleCheckpoint<T>& ck) {
  detail::ByteWriter w;
  detail::write_header(w, CheckpointKind::Module, sizeof(T));
  const auto& a = ck.params.arch;
  w.put<std::int32_t>(a.split_k);
  w.put<std::int32_t>(a.encoder_embed);
  detail::write_int_list(w, a.encoder_blocks);
  w.put<std::int32_t>(a.encoder_neighbors);
  detail::write_int_list(w, a.decoder_hidden);
  std::uint32_t count = 0;
  visit_tensors(ck.params, [&](const auto&) { ++count; });
  w.put<std::uint32_t>(count);
  visit_tensors(ck.params, [&](const auto& t) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.cols()));
    w.bytes(t.data(), static_cast<std::size_t>(t.size()) * sizeof(T));
  });
  w.string(ck.rng_state);
  w.put<std::uint64_t>(ck.step);
  return w.str();
}

template <typename T>
void save_checkpoint(const ModuleCheckpoint<T>& ck, const fs::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(ck));
}

/// Loads a module checkpoint; the whole file is validated before anything is
/// returned. Stored scalars of the other width are converted.
template <typename T>
ModuleCheckpoint<T> load_module_checkpoint(const fs::path& path) {
  const auto data = detail::read_file(path);
  detail::ByteReader r(data, path.string());
  const auto scalar = detail::read_header(r, CheckpointKind::Module);
  ArchConfig a;
  a.split_k = r.get<std::int32_t>();
  a.encoder_embed = r.get<std::int32_t>();
  a.encoder_blocks = detail::read_int_list(r);
  a.encoder_neighbors = r.get<std::int32_t>();
  a.decoder_hidden = detail::read_int_list(r);
  try {
    a.validate();
  } catch (const Error& e) {
    fail(ErrorKind::FormatError, path.string() + ": " + e.what());
  }
  ModuleCheckpoint<T> ck;
  ck.params = make_module<T>(a, 0);  // shapes only; every value is overwritten
  std::uint32_t expected = 0;
  visit_tensors(ck.params, [&](const auto&) { ++expected; });
  const auto count = r.get<std::uint32_t>();
  require(count == expected, ErrorKind::ShapeError,
          path.string() + ": " + std::to_string(count) + " tensors, architecture needs " + std::to_string(expected));
  std::uint32_t index = 0;
  visit_tensors(ck.params, [&](auto& t) {
    const auto rows = r.get<std::uint32_t>(), cols = r.get<std::uint32_t>();
    require(rows == t.rows() && cols == t.cols(), ErrorKind::ShapeError,
            path.string() + ": tensor " + std::to_string(index) + " is " + std::to_string(rows) + "x" +
                std::to_string(cols) + ", expected " + std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
    detail::read_scalars(r, scalar, t.data(), static_cast<std::size_t>(t.size()));
    ++index;
  });
  ck.rng_state = r.string(1 << 20);
  ck.step = r.get<std::uint64_t>();
  detail::finish(r);
  return ck;
}

template <typename T>
std::string encode_checkpoint(const GaussianCheckpoint<T>& ck) {
  const auto& g = ck.gaussians;
  require(g.congruent(), ErrorKind::ShapeError, "gaussian arrays differ in length");
  detail::ByteWriter w;
  detail::write_header(w, CheckpointKind::Gaussians, sizeof(T));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(g.space));
  w.put<std::uint64_t>(g.size());
  for (const auto& v : g.positions) w.bytes(v.data(), 3 * sizeof(T));
  for (const auto& v : g.scales) w.bytes(v.data(), 2 * sizeof(T));
  w.bytes(g.opacities.data(), g.size() * sizeof(T));
  for (const auto& v : g.sh) w.bytes(v.data(), kShCoeffCount * sizeof(T));
  for (const auto& v : g.normals) w.bytes(v.data(), 3 * sizeof(T));
  w.bytes(g.angles.data(), g.size() * sizeof(T));
  w.string(ck.rng_state);
  w.put<std::uint64_t>(ck.step);
  return w.str();
}

template <typename T>
void save_checkpoint(const GaussianCheckpoint<T>& ck, const fs::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(ck));
}

template <typename T>
GaussianCheckpoint<T> load_gaussian_checkpoint(const fs::path& path) {
  const auto data = detail::read_file(path);
  detail::ByteReader r(data, path.string());
  const auto scalar = detail::read_header(r, CheckpointKind::Gaussians);
  const auto space = r.get<std::uint8_t>();
  require(space <= 1, ErrorKind::FormatError, path.string() + ": unknown space tag");
  const auto m = r.get<std::uint64_t>();
  const std::size_t per = (3 + 2 + 1 + kShCoeffCount + 3 + 1) * scalar;
  require(m <= r.remaining() / per, ErrorKind::UnexpectedEof,
          path.string() + ": truncated gaussian arrays (" + std::to_string(m) + " declared)");
  GaussianCheckpoint<T> ck;
  auto& g = ck.gaussians;
  g.space = static_cast<SpaceTag>(space);
  g.resize(m);
  for (auto& v : g.positions) detail::read_scalars(r, scalar, v.data(), 3);
  for (auto& v : g.scales) detail::read_scalars(r, scalar, v.data(), 2);
  detail::read_scalars(r, scalar, g.opacities.data(), m);
  for (auto& v : g.sh) detail::read_scalars(r, scalar, v.data(), kShCoeffCount);
  for (auto& v : g.normals) detail::read_scalars(r, scalar, v.data(), 3);
  detail::read_scalars(r, scalar, g.angles.data(), m);
  ck.rng_state = r.string(1 << 20);
  ck.step = r.get<std::uint64_t>();
  detail::finish(r);
  return ck;
}

}  // namespace splatpatch
