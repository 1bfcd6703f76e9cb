#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "panfpn/fusion.hpp"
#include "json.hpp"

namespace panfpn {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CategoryMeta {
    int id = 0;
    std::string name;
    bool is_thing = false;
};

struct SegmentRecord {
    uint32_t id = 0;
    int category_id = 0;
    int area = 0;
    bool iscrowd = false;
};

struct AnnotationRecord {
    int64_t image_id = 0;
    std::string file_name;
    std::vector<SegmentRecord> segments_info;
};

// ---------------------------------------------------------------------------
// PNG id-map codec. Segment ids are encoded as id = R + 256*G + 256^2*B, 0 = void.
// Writer emits 8-bit RGB, filter 0 scanlines, one fixed-level zlib stream, so bytes
// are reproducible for a given id map.
// ---------------------------------------------------------------------------

namespace pngio {

inline void put_u32be(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

inline uint32_t get_u32be(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

inline void write_chunk(std::string& out, const char type[4], const std::string& payload) {
    put_u32be(out, static_cast<uint32_t>(payload.size()));
    std::string body(type, 4);
    body += payload;
    out += body;
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    put_u32be(out, crc);
}

inline std::string zlib_deflate(const std::string& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string out(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  6) != Z_OK) {
        throw IoError("zlib compression failed");
    }
    out.resize(bound);
    return out;
}

inline std::string zlib_inflate(const unsigned char* data, size_t size, size_t expected) {
    std::string out(expected, '\0');
    uLongf dest_len = static_cast<uLongf>(expected);
    const int rc = uncompress(reinterpret_cast<Bytef*>(out.data()), &dest_len, data,
                              static_cast<uLong>(size));
    if (rc != Z_OK || dest_len != expected) throw FormatError("corrupt PNG pixel data");
    return out;
}

}  // namespace pngio

/// Encodes an id map as deterministic 8-bit RGB PNG bytes.
inline std::string encode_id_png(const std::vector<uint32_t>& ids, int h, int w) {
    if (ids.size() != static_cast<size_t>(h) * w) throw ShapeError("id map size mismatch");
    std::string raw;
    raw.reserve(static_cast<size_t>(h) * (static_cast<size_t>(w) * 3 + 1));
    for (int y = 0; y < h; ++y) {
        raw.push_back('\0');  // filter type 0
        for (int x = 0; x < w; ++x) {
            const uint32_t id = ids[static_cast<size_t>(y) * w + x];
            if (id >= 256u * 256u * 256u) {
                throw ValidationError("segment id " + std::to_string(id) + " exceeds 256^3 - 1");
            }
            raw.push_back(static_cast<char>(id & 0xff));
            raw.push_back(static_cast<char>((id >> 8) & 0xff));
            raw.push_back(static_cast<char>((id >> 16) & 0xff));
        }
    }
    std::string png("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    pngio::put_u32be(ihdr, static_cast<uint32_t>(w));
    pngio::put_u32be(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // not interlaced
    pngio::write_chunk(png, "IHDR", ihdr);
    pngio::write_chunk(png, "IDAT", pngio::zlib_deflate(raw));
    pngio::write_chunk(png, "IEND", "");
    return png;
}

/// Decodes an 8-bit RGB non-interlaced PNG into an id map. Supports all five scanline
/// filters so externally produced files load too.
inline std::vector<uint32_t> decode_id_png(const std::string& bytes, int& h, int& w) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 8 || std::memcmp(p, "\x89PNG\r\n\x1a\n", 8) != 0) {
        throw FormatError("not a PNG file");
    }
    size_t pos = 8;
    int width = 0, height = 0;
    std::string idat;
    bool saw_ihdr = false, saw_iend = false;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = pngio::get_u32be(p + pos);
        if (pos + 12 + len > bytes.size()) throw FormatError("truncated PNG chunk");
        const std::string type(bytes, pos + 4, 4);
        const unsigned char* payload = p + pos + 8;
        if (type == "IHDR") {
            width = static_cast<int>(pngio::get_u32be(payload));
            height = static_cast<int>(pngio::get_u32be(payload + 4));
            const int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8 || color != 2) {
                throw FormatError("id PNG must be 8-bit RGB, got depth " + std::to_string(depth) +
                                  " color type " + std::to_string(color));
            }
            if (interlace != 0) throw FormatError("interlaced PNG not supported");
            saw_ihdr = true;
        } else if (type == "IDAT") {
            idat.append(reinterpret_cast<const char*>(payload), len);
        } else if (type == "IEND") {
            saw_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || width <= 0 || height <= 0) throw FormatError("PNG missing IHDR");
    if (!saw_iend) throw FormatError("PNG missing IEND");

    const size_t stride = static_cast<size_t>(width) * 3;
    const std::string raw = pngio::zlib_inflate(reinterpret_cast<const unsigned char*>(idat.data()),
                                                idat.size(), (stride + 1) * height);
    std::vector<unsigned char> prev(stride, 0), cur(stride, 0);
    std::vector<uint32_t> ids(static_cast<size_t>(width) * height, 0);
    for (int y = 0; y < height; ++y) {
        const auto* row = reinterpret_cast<const unsigned char*>(raw.data()) + y * (stride + 1);
        const int filter = row[0];
        for (size_t i = 0; i < stride; ++i) {
            const int x = row[1 + i];
            const int a = i >= 3 ? cur[i - 3] : 0;
            const int b = prev[i];
            const int c = i >= 3 ? prev[i - 3] : 0;
            int v;
            switch (filter) {
                case 0: v = x; break;
                case 1: v = x + a; break;
                case 2: v = x + b; break;
                case 3: v = x + (a + b) / 2; break;
                case 4: {
                    const int pp = a + b - c;
                    const int pa = std::abs(pp - a), pb = std::abs(pp - b), pc = std::abs(pp - c);
                    v = x + (pa <= pb && pa <= pc ? a : (pb <= pc ? b : c));
                    break;
                }
                default: throw FormatError("unknown PNG filter " + std::to_string(filter));
            }
            cur[i] = static_cast<unsigned char>(v & 0xff);
        }
        for (int x = 0; x < width; ++x) {
            ids[static_cast<size_t>(y) * width + x] =
                cur[x * 3] + 256u * cur[x * 3 + 1] + 65536u * cur[x * 3 + 2];
        }
        std::swap(prev, cur);
    }
    h = height;
    w = width;
    return ids;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Panoptic dataset JSON (images / annotations / categories) + id PNGs.
// ---------------------------------------------------------------------------

struct PanopticDataset {
    struct ImageMeta {
        int64_t id;
        std::string file_name;
        int width = 0, height = 0;
    };
    std::vector<ImageMeta> images;
    std::vector<AnnotationRecord> annotations;
    std::vector<CategoryMeta> categories;

    CategoryTable category_table() const {
        CategoryTable t;
        for (const auto& c : categories) t[c.id] = c.is_thing;
        return t;
    }
};

inline PanopticDataset parse_dataset_json(const std::string& json_text, const std::string& origin) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed JSON in " + origin + ": " + e.what());
    }
    PanopticDataset ds;
    try {
        for (const auto& img : j.value("images", nlohmann::json::array())) {
            ds.images.push_back({img.at("id").get<int64_t>(),
                                 img.at("file_name").get<std::string>(),
                                 img.value("width", 0), img.value("height", 0)});
        }
        for (const auto& ann : j.value("annotations", nlohmann::json::array())) {
            AnnotationRecord rec;
            rec.image_id = ann.at("image_id").get<int64_t>();
            rec.file_name = ann.at("file_name").get<std::string>();
            for (const auto& seg : ann.at("segments_info")) {
                rec.segments_info.push_back({seg.at("id").get<uint32_t>(),
                                             seg.at("category_id").get<int>(),
                                             seg.value("area", 0),
                                             seg.value("iscrowd", 0) != 0});
            }
            ds.annotations.push_back(std::move(rec));
        }
        for (const auto& cat : j.value("categories", nlohmann::json::array())) {
            ds.categories.push_back({cat.at("id").get<int>(), cat.value("name", std::string()),
                                     cat.value("isthing", 0) != 0});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("unexpected dataset schema in " + origin + ": " + e.what());
    }
    return ds;
}

inline PanopticDataset load_dataset_json(const std::string& json_path) {
    return parse_dataset_json(read_file(json_path), json_path);
}

inline void save_dataset_json(const std::string& json_path, const PanopticDataset& ds) {
    nlohmann::json j;
    j["images"] = nlohmann::json::array();
    for (const auto& img : ds.images) {
        j["images"].push_back({{"id", img.id},
                               {"file_name", img.file_name},
                               {"width", img.width},
                               {"height", img.height}});
    }
    j["annotations"] = nlohmann::json::array();
    for (const auto& ann : ds.annotations) {
        nlohmann::json segs = nlohmann::json::array();
        for (const auto& s : ann.segments_info) {
            segs.push_back({{"id", s.id},
                            {"category_id", s.category_id},
                            {"area", s.area},
                            {"iscrowd", s.iscrowd ? 1 : 0}});
        }
        j["annotations"].push_back(
            {{"image_id", ann.image_id}, {"file_name", ann.file_name}, {"segments_info", segs}});
    }
    j["categories"] = nlohmann::json::array();
    for (const auto& c : ds.categories) {
        j["categories"].push_back({{"id", c.id}, {"name", c.name}, {"isthing", c.is_thing ? 1 : 0}});
    }
    write_file(json_path, j.dump(2));
}

/// Builds a validated PanopticMap from one annotation's PNG. With repair_areas set,
/// declared areas are replaced by the pixel counts instead of raising.
inline PanopticMap load_panoptic_png(const std::string& png_path, const AnnotationRecord& ann,
                                     const CategoryTable& categories, bool repair_areas = false) {
    int h = 0, w = 0;
    const auto ids = decode_id_png(read_file(png_path), h, w);
    PanopticMap map(h, w);
    map.id_map = ids;
    std::map<uint32_t, int> pixel_areas;
    for (uint32_t id : ids) {
        if (id != 0) ++pixel_areas[id];
    }
    for (const auto& seg : ann.segments_info) {
        auto it = pixel_areas.find(seg.id);
        if (it == pixel_areas.end()) {
            throw ValidationError("image " + std::to_string(ann.image_id) + ": segment " +
                                  std::to_string(seg.id) + " listed in JSON but absent from PNG");
        }
        if (!repair_areas && seg.area != 0 && seg.area != it->second) {
            throw ValidationError("image " + std::to_string(ann.image_id) + ": segment " +
                                  std::to_string(seg.id) + " declares area " +
                                  std::to_string(seg.area) + " but covers " +
                                  std::to_string(it->second) + " pixels");
        }
        auto cat = categories.find(seg.category_id);
        if (cat == categories.end()) {
            throw ValidationError("image " + std::to_string(ann.image_id) + ": segment " +
                                  std::to_string(seg.id) + " has unknown category " +
                                  std::to_string(seg.category_id));
        }
        map.segments[seg.id] = {seg.category_id, cat->second, it->second, seg.iscrowd};
    }
    for (const auto& [id, area] : pixel_areas) {
        if (!map.segments.count(id)) {
            throw ValidationError("image " + std::to_string(ann.image_id) + ": PNG id " +
                                  std::to_string(id) + " missing from segments_info");
        }
    }
    map.validate();
    return map;
}

/// Streams (PanopticMap, AnnotationRecord) pairs, one image in memory at a time.
class DatasetLoader {
public:
    DatasetLoader(const std::string& json_path, const std::string& png_dir,
                  bool repair_areas = false)
        : dataset_(load_dataset_json(json_path)), png_dir_(png_dir), repair_areas_(repair_areas),
          categories_(dataset_.category_table()) {}

    const PanopticDataset& dataset() const { return dataset_; }
    size_t size() const { return dataset_.annotations.size(); }

    std::pair<PanopticMap, const AnnotationRecord*> load(size_t i) const {
        const AnnotationRecord& ann = dataset_.annotations.at(i);
        const std::string path = (std::filesystem::path(png_dir_) / ann.file_name).string();
        return {load_panoptic_png(path, ann, categories_, repair_areas_), &ann};
    }

private:
    PanopticDataset dataset_;
    std::string png_dir_;
    bool repair_areas_;
    CategoryTable categories_;
};

/// Writes one fused map: id PNG plus its annotation entry appended to `ds`.
inline void append_panoptic_result(PanopticDataset& ds, const std::string& png_dir,
                                   int64_t image_id, const std::string& file_name,
                                   const PanopticMap& map) {
    write_file((std::filesystem::path(png_dir) / file_name).string(),
               encode_id_png(map.id_map, map.h, map.w));
    AnnotationRecord rec;
    rec.image_id = image_id;
    rec.file_name = file_name;
    for (const auto& [id, seg] : map.segments) {
        rec.segments_info.push_back({id, seg.category, seg.area, seg.crowd});
    }
    ds.annotations.push_back(std::move(rec));
    ds.images.push_back({image_id, file_name, map.w, map.h});
}

// ---------------------------------------------------------------------------
// Instance predictions: JSON lines, one object per instance with a row-major RLE
// mask. Runs alternate 0/1 counts and start with the count of zeros.
// ---------------------------------------------------------------------------

inline std::vector<uint32_t> rle_encode(const std::vector<uint8_t>& mask) {
    std::vector<uint32_t> runs;
    uint8_t cur = 0;
    uint32_t len = 0;
    for (uint8_t v : mask) {
        if (v == cur) {
            ++len;
        } else {
            runs.push_back(len);
            cur = v;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

inline std::vector<uint8_t> rle_decode(const std::vector<uint32_t>& runs, size_t expected) {
    std::vector<uint8_t> mask;
    mask.reserve(expected);
    uint8_t cur = 0;
    for (uint32_t len : runs) {
        mask.insert(mask.end(), len, cur);
        cur = 1 - cur;
    }
    if (mask.size() != expected) {
        throw FormatError("RLE decodes to " + std::to_string(mask.size()) + " pixels, expected " +
                          std::to_string(expected));
    }
    return mask;
}

inline std::vector<InstancePrediction> load_instances_jsonl(const std::string& path, int h, int w) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<InstancePrediction> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        try {
            InstancePrediction inst;
            inst.category = j.at("category").get<int>();
            inst.score = j.at("score").get<double>();
            const auto size = j.at("size");
            if (size.at(0).get<int>() != h || size.at(1).get<int>() != w) {
                throw FormatError(path + ":" + std::to_string(line_no) + ": instance size [" +
                                  std::to_string(size.at(0).get<int>()) + "," +
                                  std::to_string(size.at(1).get<int>()) + "] does not match image " +
                                  std::to_string(h) + "x" + std::to_string(w));
            }
            inst.mask = rle_decode(j.at("counts").get<std::vector<uint32_t>>(),
                                   static_cast<size_t>(h) * w);
            out.push_back(std::move(inst));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": bad instance record: " +
                              e.what());
        }
    }
    return out;
}

inline void save_instances_jsonl(const std::string& path,
                                 const std::vector<InstancePrediction>& instances, int h, int w) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    for (const auto& inst : instances) {
        nlohmann::json j{{"category", inst.category},
                         {"score", inst.score},
                         {"size", {h, w}},
                         {"counts", rle_encode(inst.mask)}};
        f << j.dump() << "\n";
    }
}

}  // namespace panfpn
