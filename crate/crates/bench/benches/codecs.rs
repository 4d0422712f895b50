use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use hive_core::mqtt::codec::{decode_packet, encode_packet, MqttPacket, Publish, QoS};
use hive_core::mqtt::topic_matches;
use hive_core::serial::{crc16, crc16_bitwise, decode_frame, encode_frame};
use hive_core::tsdb::{decode_point, encode_point, DataPoint};

fn crc(c: &mut Criterion) {
    let data: Vec<u8> = (0..240u32).map(|i| (i * 31 % 251) as u8).collect();
    let mut g = c.benchmark_group("crc16");
    g.throughput(Throughput::Bytes(data.len() as u64));
    g.bench_function("table", |b| b.iter(|| crc16(black_box(&data))));
    g.bench_function("bitwise", |b| b.iter(|| crc16_bitwise(black_box(&data))));
    g.finish();
}

fn frames(c: &mut Criterion) {
    let body = b"R 412 900 temp_in_c=900,35.012,34.8,35.2 weight_kg=900,42.1,42.0,42.3";
    let line = encode_frame(body).unwrap();
    c.bench_function("frame/encode", |b| b.iter(|| encode_frame(black_box(body)).unwrap()));
    c.bench_function("frame/decode", |b| {
        b.iter(|| decode_frame(black_box(&line)).unwrap().len())
    });
}

fn mqtt(c: &mut Criterion) {
    let payload = vec![b'x'; 420];
    let packet = MqttPacket::Publish(Publish {
        qos: QoS::AtLeastOnce,
        packet_id: Some(4711),
        ..Publish::new("hive/h01/telemetry", payload)
    });
    let bytes = encode_packet(&packet).unwrap();
    let mut g = c.benchmark_group("mqtt");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("encode_publish", |b| {
        b.iter(|| encode_packet(black_box(&packet)).unwrap())
    });
    g.bench_function("decode_publish", |b| {
        b.iter(|| decode_packet(black_box(&bytes)).unwrap().1)
    });
    g.finish();

    c.bench_function("topic/match_wildcards", |b| {
        b.iter(|| topic_matches(black_box("hive/+/telemetry/#"), black_box("hive/h01/telemetry/raw")).unwrap())
    });
}

fn points(c: &mut Criterion) {
    let p = DataPoint::new("hive", 1_700_000_900_000_000_000)
        .tag("hive_id", "h01")
        .field("temp_in_c", 35.0125)
        .field("weight_kg", 42.117)
        .field("co2_ppm", 912.5)
        .field("seq", 1.0);
    let line = encode_point(&p).unwrap();
    c.bench_function("point/encode", |b| b.iter(|| encode_point(black_box(&p)).unwrap()));
    c.bench_function("point/decode", |b| {
        b.iter_batched(|| line.clone(), |l| decode_point(&l).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, crc, frames, mqtt, points);
criterion_main!(benches);
