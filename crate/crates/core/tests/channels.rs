use std::thread;
use std::time::Duration;

use proptest::prelude::*;

use tactile_core::wire::{channel, fifo, latest_wins, ChannelError, Policy};

#[derive(Debug, Clone)]
enum Op {
    Send,
    Recv,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(prop_oneof![Just(Op::Send), Just(Op::Recv)], 0..200)
}

proptest! {
    // Against a model of the single slot: a receive returns the newest value
    // sent since the previous receive, or nothing.
    #[test]
    fn latest_wins_matches_single_slot_model(script in ops()) {
        let (tx, rx) = latest_wins::<u64>();
        let mut next = 0u64;
        let mut pending: Option<u64> = None;
        let mut overwritten = 0;
        for op in script {
            match op {
                Op::Send => {
                    tx.send(next).unwrap();
                    if pending.replace(next).is_some() {
                        overwritten += 1;
                    }
                    next += 1;
                }
                Op::Recv => match pending.take() {
                    Some(v) => prop_assert_eq!(rx.try_recv(), Ok(v)),
                    None => prop_assert_eq!(rx.try_recv(), Err(ChannelError::Empty)),
                },
            }
        }
        prop_assert_eq!(rx.overwritten(), overwritten);
        prop_assert_eq!(rx.sent(), next);
    }

    #[test]
    fn fifo_loses_nothing_below_capacity(script in ops(), cap in 1usize..16) {
        let (tx, rx) = fifo::<u64>(cap).unwrap();
        let mut queued = std::collections::VecDeque::new();
        let mut next = 0u64;
        for op in script {
            match op {
                Op::Send => {
                    let r = tx.try_send(next);
                    if queued.len() < cap {
                        prop_assert!(r.is_ok());
                        queued.push_back(next);
                    } else {
                        prop_assert_eq!(r, Err(ChannelError::Full));
                    }
                    next += 1;
                }
                Op::Recv => prop_assert_eq!(rx.try_recv().ok(), queued.pop_front()),
            }
        }
    }
}

#[test]
fn slow_consumer_is_at_most_one_item_stale() {
    let (tx, rx) = latest_wins::<u64>();
    let producer = thread::spawn(move || {
        for i in 1..=2_000u64 {
            tx.send(i).unwrap();
            if i % 50 == 0 {
                thread::sleep(Duration::from_millis(1));
            }
        }
    });
    let mut last = 0;
    loop {
        match rx.recv_timeout(Duration::from_secs(5)) {
            Ok(v) => {
                assert!(v > last, "went backwards: {v} after {last}");
                assert!(v <= rx.sent());
                last = v;
                thread::sleep(Duration::from_micros(300));
            }
            Err(ChannelError::Disconnected) => break,
            Err(e) => panic!("{e}"),
        }
    }
    producer.join().unwrap();
    assert_eq!(last, 2_000);
    assert!(rx.overwritten() > 0);
}

#[test]
fn fifo_backpressure_delivers_everything_in_order() {
    let (tx, rx) = channel::<u32>(Policy::Fifo, 4).unwrap();
    let producer = thread::spawn(move || {
        for i in 0..10_000 {
            tx.send(i).unwrap();
        }
    });
    let mut expected = 0;
    while let Ok(v) = rx.recv() {
        assert_eq!(v, expected);
        expected += 1;
    }
    producer.join().unwrap();
    assert_eq!(expected, 10_000);
}
